"""
Synthetic abdominal phantoms with an asymmetric kidney pair.

The left kidney (label 1, low ``x``) is larger than the right one by
``size_asymmetry_ratio`` along every axis and sits ``superior_offset`` voxels
higher. Each side also gets its own volume-preserving shape perturbation and
in-plane tilt, so a flipped right kidney never matches the left one.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Tuple

import numpy as np
from scipy import ndimage

from .volume import TARGET_SPACING, CaseRecord, LabelMask, Volume, save_archive

MAX_RETRIES = 50


class PhantomError(RuntimeError):
    pass


@dataclass
class PhantomSpec:
    seed: int = 0
    dims: Tuple[int, int, int] = (64, 128, 128)
    spacing: Tuple[float, float, float] = TARGET_SPACING
    # semi-axes (z, y, x) of the right kidney; the left one is scaled up by the ratio
    right_semi_axes: Tuple[float, float, float] = (9.0, 11.0, 8.0)
    size_asymmetry_ratio: float = 1.15
    shape_jitter: float = 0.08
    scale_jitter: float = 0.04
    max_tilt_deg: float = 12.0
    position_jitter: float = 3.0
    superior_offset: float = 4.0
    kidney_mean: float = 150.0
    kidney_std: float = 30.0
    background_mean: float = 40.0
    background_std: float = 30.0
    smoothing: float = 1.0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.right_semi_axes = tuple(float(a) for a in self.right_semi_axes)
        if self.size_asymmetry_ratio <= 1:
            raise PhantomError("size_asymmetry_ratio must be > 1")
        # worst-case extent of the larger (left) kidney, tilt included
        za, ya, xa = (a * np.exp(2 * self.shape_jitter) * (1 + self.scale_jitter)
                      for a in self.left_semi_axes)
        plane = max(ya, xa) + self.position_jitter
        room = (
            self.dims[0] / 2 - 1 - (za + self.position_jitter + self.superior_offset / 2),
            self.dims[1] / 2 - 1 - plane,
            self.dims[2] / 4 - 1 - plane,
        )
        if min(room) <= 0:
            raise PhantomError(f"kidneys cannot fit strictly inside their sagittal halves "
                               f"for dims {self.dims}")

    @property
    def left_semi_axes(self) -> Tuple[float, float, float]:
        return tuple(a * self.size_asymmetry_ratio for a in self.right_semi_axes)

    @classmethod
    def from_dict(cls, d) -> "PhantomSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d or {}) - known
        if unknown:
            raise PhantomError(f"unknown phantom keys: {sorted(unknown)}")
        return cls(**(d or {}))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def case_rng(seed: int, case_index: int) -> np.random.Generator:
    """Counter-based generator keyed on (seed, case_index); independent of generation order."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, case_index])))


def _ellipsoid(dims, center, semi_axes, tilt):
    z, y, x = np.ogrid[: dims[0], : dims[1], : dims[2]]
    dz, dy, dx = z - center[0], y - center[1], x - center[2]
    c, s = np.cos(tilt), np.sin(tilt)
    ry = c * dy - s * dx
    rx = s * dy + c * dx
    return (dz / semi_axes[0]) ** 2 + (ry / semi_axes[1]) ** 2 + (rx / semi_axes[2]) ** 2 <= 1.0


def _draw_kidney(rng, spec, base_axes, center, patient_scale):
    f1, f2 = np.exp(rng.uniform(-spec.shape_jitter, spec.shape_jitter, size=2))
    factors = np.array([f1, f2, 1.0 / (f1 * f2)])
    axes = np.asarray(base_axes) * factors * patient_scale
    tilt = np.deg2rad(rng.uniform(-spec.max_tilt_deg, spec.max_tilt_deg))
    center = np.asarray(center) + rng.uniform(-spec.position_jitter, spec.position_jitter, size=3)
    return _ellipsoid(spec.dims, center, axes, tilt)


def _fits(region, dims, x_lo, x_hi):
    idx = np.nonzero(region)
    if idx[0].size == 0:
        return False
    inner = all(ix.min() >= 1 and ix.max() <= n - 2 for ix, n in zip(idx, dims))
    in_half = idx[2].min() >= x_lo and idx[2].max() <= x_hi
    _, n_comp = ndimage.label(region)
    return inner and in_half and n_comp == 1


def _smooth_field(rng, dims, sigma):
    field = rng.standard_normal(dims)
    if sigma > 0:
        field = ndimage.gaussian_filter(field, sigma)
    return field / field.std()


def generate_case(spec: PhantomSpec, case_index: int):
    """Return ``(Volume, LabelMask)`` for one phantom case; bit-identical for equal arguments."""
    rng = case_rng(spec.seed, case_index)
    dims = spec.dims
    mid = dims[2] // 2
    zc, yc = dims[0] / 2, dims[1] / 2
    for _ in range(MAX_RETRIES):
        patient_scale = rng.uniform(1 - spec.scale_jitter, 1 + spec.scale_jitter)
        left = _draw_kidney(rng, spec, spec.left_semi_axes,
                            (zc + spec.superior_offset / 2, yc, dims[2] * 0.25), patient_scale)
        right = _draw_kidney(rng, spec, spec.right_semi_axes,
                             (zc - spec.superior_offset / 2, yc, dims[2] * 0.75), patient_scale)
        if _fits(left, dims, 1, mid - 1) and _fits(right, dims, mid + 1, dims[2] - 2):
            break
    else:
        raise PhantomError(f"case {case_index}: kidneys did not fit after {MAX_RETRIES} draws")

    labels = np.zeros(dims, dtype=np.uint8)
    labels[left] = 1
    labels[right] = 2
    fg = labels > 0
    base = np.where(fg, spec.kidney_mean, spec.background_mean)
    if spec.smoothing > 0:
        base = ndimage.gaussian_filter(base, 0.5 * spec.smoothing)
    noise = _smooth_field(rng, dims, spec.smoothing)
    noise *= np.where(fg, spec.kidney_std, spec.background_std)
    image = (base + noise).astype(np.float32)
    return Volume(image, spec.spacing), LabelMask(labels, spec.spacing)


def case_id(index: int) -> str:
    return f"case_{index:05d}"


def _digest(array) -> str:
    return hashlib.sha256(np.ascontiguousarray(array).tobytes()).hexdigest()


def generate_dataset(spec: PhantomSpec, n_cases: int, out_dir):
    """
    Write ``n_cases`` phantom archives plus ``manifest.json`` into ``out_dir``.

    Returns the list of archive paths.
    """
    if n_cases < 1:
        raise ValueError(f"n_cases must be >= 1, got {n_cases}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries, paths = [], []
    for i in range(n_cases):
        vol, mask = generate_case(spec, i)
        cid = case_id(i)
        paths.append(save_archive(CaseRecord(cid, vol, mask, meta={"source": "phantom"}), out_dir))
        centroids = [np.argwhere(mask.data == lab).mean(axis=0).round(3).tolist() for lab in (1, 2)]
        entries.append({
            "case_id": cid,
            "index": i,
            "voxels_left": int((mask.data == 1).sum()),
            "voxels_right": int((mask.data == 2).sum()),
            "centroid_left": centroids[0],
            "centroid_right": centroids[1],
            "image_sha256": _digest(vol.data),
            "mask_sha256": _digest(mask.data),
        })
    manifest = {"phantom_spec": spec.to_dict(), "n_cases": n_cases, "cases": entries}
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return paths


def manifest_hash(out_dir) -> str:
    return hashlib.sha256((Path(out_dir) / "manifest.json").read_bytes()).hexdigest()
