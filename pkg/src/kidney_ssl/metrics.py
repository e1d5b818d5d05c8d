"""
Dice, Hausdorff distance and boundary-length difference for binary masks.

A boundary voxel is a foreground voxel with at least one background
face-neighbour; voxels on the volume faces count as having background
neighbours outside the grid.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

_FACE = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class MetricsReport:
    case_id: str
    dc: float
    hd: float
    bl: float


def _pair(pred, gt):
    pred, gt = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return pred, gt


def confusion(pred, gt) -> ConfusionCounts:
    pred, gt = _pair(pred, gt)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def dice(pred, gt) -> float:
    """``2TP / (2TP + FP + FN)``; two empty masks score 1."""
    c = confusion(pred, gt)
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2 * c.tp / denom


def boundary(mask) -> np.ndarray:
    mask = np.asarray(mask).astype(bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_FACE, border_value=0)


def boundary_count(mask) -> int:
    return int(np.count_nonzero(boundary(mask)))


def hausdorff(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float:
    """Symmetric Hausdorff distance (mm) between the boundary voxel centres of two masks."""
    pred, gt = _pair(pred, gt)
    if not pred.any():
        raise ValueError("prediction mask is empty; Hausdorff distance undefined")
    if not gt.any():
        raise ValueError("ground-truth mask is empty; Hausdorff distance undefined")
    scale = np.asarray(spacing, dtype=np.float64)
    pa = np.argwhere(boundary(pred)) * scale
    pb = np.argwhere(boundary(gt)) * scale
    d_ab = cKDTree(pb).query(pa, k=1)[0].max()
    d_ba = cKDTree(pa).query(pb, k=1)[0].max()
    return float(max(d_ab, d_ba))


def boundary_length_diff(pred, gt) -> float:
    """``100 |B(pred) - B(gt)| / B(gt)`` with ``B`` the boundary voxel count."""
    pred, gt = _pair(pred, gt)
    b_gt = boundary_count(gt)
    if b_gt == 0:
        raise ValueError("ground-truth mask is empty; boundary length difference undefined")
    return 100.0 * abs(boundary_count(pred) - b_gt) / b_gt


def evaluate_case(pred_probs, gt, spacing, threshold: float = 0.5, pad_record=None,
                  case_id: str = "") -> MetricsReport:
    """
    Threshold, strip padding and score one case. An empty prediction gets
    ``hd = inf`` rather than an error so a bad model still yields a report.
    """
    pred = np.asarray(pred_probs) >= threshold
    gt = np.asarray(gt) > 0
    if pad_record is not None:
        pred, gt = pad_record.unpad(pred), pad_record.unpad(gt)
    pred, gt = _pair(pred, gt)
    dc = dice(pred, gt)
    hd = hausdorff(pred, gt, spacing) if pred.any() and gt.any() else float("inf")
    bl = boundary_length_diff(pred, gt) if gt.any() else float("nan")
    return MetricsReport(case_id, dc, hd, bl)


def aggregate(reports: Sequence[MetricsReport]) -> dict:
    def mean(values):
        values = [v for v in values if np.isfinite(v)]
        return float(np.mean(values)) if values else float("nan")

    return {
        "n_cases": len(reports),
        "dc": mean(r.dc for r in reports),
        "hd": mean(r.hd for r in reports),
        "bl": mean(r.bl for r in reports),
        "n_infinite_hd": sum(1 for r in reports if not np.isfinite(r.hd)),
    }


def write_reports(reports: Sequence[MetricsReport], out_dir) -> dict:
    """Write ``metrics.csv`` (per case) and ``metrics.json`` (per case + means)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id", "dc", "hd_mm", "bl_percent"])
        for r in reports:
            w.writerow([r.case_id, f"{r.dc:.6f}", f"{r.hd:.6f}", f"{r.bl:.6f}"])
    summary = {"cases": [asdict(r) for r in reports], "mean": aggregate(reports)}
    with open(out_dir / "metrics.json", "w") as fh:
        json.dump(summary, fh, indent=2, allow_nan=True)
    return summary
