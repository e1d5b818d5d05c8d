"""
Experiment harness behind the command-line interface.

Each ``cmd_*`` function takes an :class:`ExperimentConfig` plus paths and
writes a self-contained run directory (config snapshot, logs, checkpoints,
curves). ``cmd_compare`` runs the paired pre-trained vs. scratch experiment
for every configured seed.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import yaml

from . import training as T
from .config import ConfigError, ExperimentConfig, dump_config
from .metrics import MetricsReport, aggregate, evaluate_case, write_reports
from .models import load_checkpoint
from .phantom import case_id, generate_case, generate_dataset, manifest_hash
from .proxy_data import ProxyDataError, case_crops, sample_pairs, write_pair_manifest
from .volume import (
    CaseRecord,
    VolumeError,
    list_archives,
    load_archive,
    preprocess_case,
    preprocess_volume,
    resample_to_shape,
    save_archive,
    save_mask_like,
)

log = logging.getLogger(__name__)

CURVE_FILE = "curve.csv"
SPLIT_FILE = "split.json"
CONFIG_FILE = "config.yaml"


class DataError(RuntimeError):
    """Input data is missing, corrupt, or unusable."""


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def _kits_cases(input_dir: Path):
    """``case_XXXXX/imaging.nii.gz`` (+ optional ``segmentation.nii.gz``) directories."""
    cases = []
    for d in sorted(p for p in Path(input_dir).iterdir() if p.is_dir()):
        image = d / "imaging.nii.gz"
        if not image.exists():
            continue
        mask = d / "segmentation.nii.gz"
        cases.append((d.name, image, mask if mask.exists() else None))
    return cases


def cmd_preprocess(input_dir, output_dir, cfg: ExperimentConfig) -> Path:
    """
    Preprocess a KiTS-layout directory into case archives.

    Cases whose archive already exists are skipped, so an interrupted run can
    simply be restarted.
    """
    input_dir, output_dir = Path(input_dir), Path(output_dir)
    if not input_dir.is_dir():
        raise ConfigError(f"input directory {input_dir} does not exist")
    cases = _kits_cases(input_dir)
    if not cases:
        raise DataError(f"no case_*/imaging.nii.gz found under {input_dir}")
    import nibabel as nib

    output_dir.mkdir(parents=True, exist_ok=True)
    for cid, image, mask in cases:
        if (output_dir / f"{cid}.npz").exists() and (output_dir / f"{cid}.json").exists():
            log.info("skip %s (already preprocessed)", cid)
            continue
        try:
            v, m, pad = preprocess_case((image, mask), cfg.preprocess)
            canon = nib.as_closest_canonical(nib.load(str(image)))
        except (VolumeError, ValueError, OSError) as exc:
            raise DataError(f"case {cid}: {exc}") from exc
        meta = {
            "source": "nifti",
            "source_image": str(image.resolve()),
            # canonical (z, y, x) grid that predictions are resampled back onto
            "original_shape": [int(n) for n in canon.shape[:3][::-1]],
            "original_spacing": [float(z) for z in canon.header.get_zooms()[:3][::-1]],
        }
        save_archive(CaseRecord(cid, v, m, pad, meta), output_dir)
        log.info("preprocessed %s -> %s", cid, v.shape)
    return output_dir


def cmd_gen_phantoms(cfg: ExperimentConfig, out_dir) -> Path:
    """Write ``cfg.n_cases`` raw phantom archives plus manifest.json."""
    out_dir = Path(out_dir)
    generate_dataset(cfg.phantom, cfg.n_cases, out_dir)
    log.info("wrote %d phantoms to %s (manifest %s)", cfg.n_cases, out_dir,
             manifest_hash(out_dir)[:12])
    return out_dir


def load_dataset(cfg: ExperimentConfig) -> List[CaseRecord]:
    """Preprocessed cases of the configured source, in case-id order."""
    cfg.validate_paths()
    if cfg.source == "phantom":
        records = []
        for i in range(cfg.n_cases):
            v, m = generate_case(cfg.phantom, i)
            v, m, pad = preprocess_volume(v, m, cfg.preprocess)
            records.append(CaseRecord(case_id(i), v, m, pad, {"source": "phantom"}))
        return records
    paths = list_archives(cfg.case_dir)
    if not paths:
        raise DataError(f"no case archives in {cfg.case_dir}")
    records = []
    for p in paths:
        try:
            records.append(load_archive(p))
        except (VolumeError, OSError) as exc:
            raise DataError(f"{p}: {exc}") from exc
    return records


def _labelled(records):
    out = [r for r in records if r.mask is not None]
    if len(out) < 2:
        raise DataError("training needs at least two cases with masks")
    return out


def make_split(records, cfg: ExperimentConfig, seed: int):
    ids = [r.case_id for r in records]
    train, val = T.split_cases(ids, cfg.seg_train.split_fraction, seed)
    return {"seed": seed, "train": train, "val": val}


def _write_split(split, run_dir: Path):
    with open(run_dir / SPLIT_FILE, "w") as fh:
        json.dump(split, fh, indent=2)


def read_split(run_dir) -> dict:
    with open(Path(run_dir) / SPLIT_FILE) as fh:
        return json.load(fh)


def build_pairs(records, split, cfg: ExperimentConfig, seed: int, run_dir: Optional[Path] = None):
    by_id = {r.case_id: r for r in records}

    def crops(ids):
        out = []
        for cid in ids:
            r = by_id[cid]
            out += case_crops(r.image, r.mask, cfg.crop_shape, cid)
        return out

    try:
        train = sample_pairs(crops(split["train"]), cfg.n_pairs_train, cfg.same_fraction, seed)
        val = sample_pairs(crops(split["val"]), cfg.n_pairs_val, cfg.same_fraction, seed + 1)
    except ProxyDataError as exc:
        raise DataError(str(exc)) from exc
    if run_dir is not None:
        write_pair_manifest(train, run_dir / "pairs_train.csv")
        write_pair_manifest(val, run_dir / "pairs_val.csv")
    return train, val


def _file_logger(run_dir: Path):
    handler = logging.FileHandler(run_dir / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    root = logging.getLogger("kidney_ssl")
    root.addHandler(handler)
    if root.level == logging.NOTSET or root.level > logging.INFO:
        root.setLevel(logging.INFO)
    return handler


def _detach_logger(handler):
    logging.getLogger("kidney_ssl").removeHandler(handler)
    handler.close()


# ---------------------------------------------------------------------------
# training commands
# ---------------------------------------------------------------------------

def cmd_train_proxy(cfg: ExperimentConfig, out_dir, records=None, resume=False) -> Path:
    """Siamese training; writes config.yaml, split.json, pair lists, curve.csv, best/final.npz."""
    run_dir = Path(out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    handler = _file_logger(run_dir)
    try:
        records = _labelled(records if records is not None else load_dataset(cfg))
        seed = cfg.proxy_train.seed
        split = make_split(records, cfg, seed)
        dump_config(cfg, run_dir / CONFIG_FILE)
        _write_split(split, run_dir)
        train, val = build_pairs(records, split, cfg, seed, run_dir)
        with T.deterministic_mode():
            T.train_proxy(train, val, cfg.architecture, cfg.proxy_train, run_dir=run_dir,
                          resume=resume)
    finally:
        _detach_logger(handler)
    return run_dir


def cmd_train_seg(cfg: ExperimentConfig, out_dir, init_ckpt=None, records=None,
                  resume=False, split=None) -> Path:
    """
    Segmentation training from scratch or from a siamese checkpoint
    (``init_ckpt``). A missing checkpoint is reported before any work starts.
    """
    if init_ckpt is not None and not Path(init_ckpt).exists():
        raise ConfigError(f"init checkpoint {init_ckpt} does not exist")
    run_dir = Path(out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    handler = _file_logger(run_dir)
    try:
        records = _labelled(records if records is not None else load_dataset(cfg))
        seed = cfg.seg_train.seed
        split = split or make_split(records, cfg, seed)
        init = "random" if init_ckpt is None else T.transfer_encoder(init_ckpt)
        snapshot = cfg.snapshot()
        snapshot["init"] = "random" if init_ckpt is None else str(Path(init_ckpt).resolve())
        dump_config(_Snap(snapshot), run_dir / CONFIG_FILE)
        _write_split(split, run_dir)
        by_id = {r.case_id: r for r in records}
        train = [T.SegCase.from_record(by_id[c]) for c in split["train"]]
        val = [T.SegCase.from_record(by_id[c]) for c in split["val"]]
        with T.deterministic_mode():
            T.train_segmentation(train, val, init, cfg.architecture, cfg.seg_train,
                                 cfg.schedule, run_dir=run_dir, resume=resume)
    finally:
        _detach_logger(handler)
    return run_dir


class _Snap:
    """Adapter so :func:`dump_config` can write an arbitrary snapshot dict."""

    def __init__(self, data):
        self.data = data

    def snapshot(self):
        return self.data


# ---------------------------------------------------------------------------
# comparison
# ---------------------------------------------------------------------------

def moving_average(values: Sequence[float], window: int) -> List[float]:
    """Trailing mean over the last ``window`` values; ``window == 1`` returns the input."""
    if window < 1:
        raise ValueError("window must be >= 1")
    values = [float(v) for v in values]
    if window == 1:
        return values
    out = []
    for i in range(len(values)):
        chunk = values[max(0, i - window + 1): i + 1]
        out.append(sum(chunk) / len(chunk))
    return out


def epochs_to_threshold(dc: Sequence[float], threshold: float) -> float:
    """Number of epochs trained when validation DC first reaches ``threshold`` (inf if never)."""
    for i, v in enumerate(dc):
        if v >= threshold:
            return float(i + 1)
    return math.inf


@dataclass
class SeedResult:
    seed: int
    mws: Optional[T.TrainingCurve] = None
    mwos: Optional[T.TrainingCurve] = None
    error: Optional[str] = None
    seconds: Dict[str, float] = field(default_factory=dict)  # wall time per stage

    def best_dc(self, arm: str) -> float:
        return max(getattr(self, arm).column("val_dc"))

    def epochs_to(self, arm: str, threshold: float) -> float:
        return epochs_to_threshold(getattr(self, arm).column("val_dc"), threshold)

    def first_dc(self, arm: str) -> float:
        return getattr(self, arm).records[0]["val_dc"]

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class ComparisonResult:
    seeds: List[SeedResult] = field(default_factory=list)
    threshold: float = 0.8

    @property
    def completed(self) -> List[SeedResult]:
        return [s for s in self.seeds if s.ok]

    def median(self, stat: str, arm: str) -> float:
        done = self.completed
        if not done:
            return math.nan
        if stat == "best_dc":
            vals = [s.best_dc(arm) for s in done]
        elif stat == "epochs_to_threshold":
            vals = [s.epochs_to(arm, self.threshold) for s in done]
        elif stat == "first_dc":
            vals = [s.first_dc(arm) for s in done]
        else:
            raise ValueError(stat)
        return float(np.median(vals))

    def summary_rows(self) -> List[dict]:
        rows = []
        for s in self.seeds:
            if not s.ok:
                rows.append({"seed": s.seed, "error": s.error})
                continue
            row = {"seed": s.seed}
            for arm in ("mwos", "mws"):
                row[f"best_dc_{arm}"] = s.best_dc(arm)
                row[f"epoch1_dc_{arm}"] = s.first_dc(arm)
                row[f"epochs_to_{self.threshold:g}_{arm}"] = s.epochs_to(arm, self.threshold)
            for stage, sec in s.seconds.items():
                row[f"seconds_{stage}"] = sec
            rows.append(row)
        return rows


def _fmt(v):
    if isinstance(v, float):
        return "never" if math.isinf(v) else f"{v:.4f}"
    return str(v)


def write_summary(result: ComparisonResult, out_dir) -> Path:
    """summary.json, summary.csv (per seed) and summary.md (median MwoS | MwS table)."""
    out_dir = Path(out_dir)
    rows = result.summary_rows()
    keys = ["seed"] + sorted({k for r in rows for k in r} - {"seed"})
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) if k in r else "" for k in keys})
    table = [("best validation DC", "best_dc"), ("epoch-1 validation DC", "first_dc"),
             (f"epochs to DC {result.threshold:g}", "epochs_to_threshold")]
    lines = [f"seeds completed: {len(result.completed)}/{len(result.seeds)} (medians)", "",
             "| metric | MwoS | MwS |", "|---|---|---|"]
    medians = {}
    for label, stat in table:
        a, b = result.median(stat, "mwos"), result.median(stat, "mws")
        medians[stat] = {"mwos": a, "mws": b}
        lines.append(f"| {label} | {_fmt(a)} | {_fmt(b)} |")
    (out_dir / "summary.md").write_text("\n".join(lines) + "\n")
    with open(out_dir / "summary.json", "w") as fh:
        json.dump({"threshold": result.threshold, "medians": _jsonable(medians),
                   "seeds": _jsonable(rows)}, fh, indent=2)
    return out_dir / "summary.md"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def snapshot_diff(a: dict, b: dict, prefix="") -> List[str]:
    """Dotted keys whose values differ between two nested snapshots."""
    out = []
    for k in sorted(set(a) | set(b)):
        key = f"{prefix}{k}"
        va, vb = a.get(k), b.get(k)
        if isinstance(va, dict) and isinstance(vb, dict):
            out += snapshot_diff(va, vb, key + ".")
        elif va != vb:
            out.append(key)
    return out


def run_seed(cfg: ExperimentConfig, seed: int, seed_dir: Path, records) -> SeedResult:
    """Proxy, transfer, MwS and MwoS for one seed on one shared split."""
    scfg = cfg.with_seed(seed)
    seconds = {}
    t0 = time.perf_counter()
    proxy_dir = cmd_train_proxy(scfg, seed_dir / "proxy", records=records)
    split = read_split(proxy_dir)
    seconds["proxy"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    mws_dir = cmd_train_seg(scfg, seed_dir / "mws", init_ckpt=proxy_dir / "best.npz",
                            records=records, split=split)
    seconds["mws"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    mwos_dir = cmd_train_seg(scfg, seed_dir / "mwos", records=records, split=split)
    seconds["mwos"] = time.perf_counter() - t0
    if read_split(mws_dir) != read_split(mwos_dir):
        raise RuntimeError("arms were trained on different splits")
    snaps = [yaml.safe_load((d / CONFIG_FILE).read_text()) for d in (mws_dir, mwos_dir)]
    diff = snapshot_diff(*snaps)
    if diff != ["init"]:
        raise RuntimeError(f"arm configurations differ beyond the init source: {diff}")
    return SeedResult(seed, T.TrainingCurve.read_csv(mws_dir / CURVE_FILE),
                      T.TrainingCurve.read_csv(mwos_dir / CURVE_FILE), seconds=seconds)


def cmd_compare(cfg: ExperimentConfig, out_dir, records=None) -> ComparisonResult:
    """
    Paired comparison over ``cfg.seeds``. A failing seed is recorded with its
    reason and the remaining seeds still run.
    """
    if not cfg.seeds:
        raise ConfigError("compare needs at least one seed")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out_dir / CONFIG_FILE)
    records = records if records is not None else load_dataset(cfg)
    result = ComparisonResult(threshold=cfg.dc_threshold)
    for seed in cfg.seeds:
        seed_dir = out_dir / f"seed_{seed}"
        t0 = time.perf_counter()
        try:
            res = run_seed(cfg, seed, seed_dir, records)
        except ConfigError:
            raise
        except (T.TrainingDivergence, DataError, VolumeError, RuntimeError, ValueError) as exc:
            log.error("seed %d failed: %s", seed, exc)
            res = SeedResult(seed, error=f"{type(exc).__name__}: {exc}")
        result.seeds.append(res)
        log.info("seed %d done in %.0f s", seed, time.perf_counter() - t0)
    render_plots(out_dir, cfg.smoothing_window)
    write_summary(result, out_dir)
    return result


def load_comparison(out_dir, threshold=0.8) -> ComparisonResult:
    result = ComparisonResult(threshold=threshold)
    for d in sorted(Path(out_dir).glob("seed_*"), key=lambda p: int(p.name.split("_")[1])):
        seed = int(d.name.split("_")[1])
        try:
            result.seeds.append(SeedResult(seed, T.TrainingCurve.read_csv(d / "mws" / CURVE_FILE),
                                           T.TrainingCurve.read_csv(d / "mwos" / CURVE_FILE)))
        except (FileNotFoundError, ValueError) as exc:
            result.seeds.append(SeedResult(seed, error=str(exc)))
    return result


def render_plots(out_dir, window: int = 5) -> List[Path]:
    """DC-vs-epoch PNG per seed plus a smoothed seed-mean plot, rendered only from the CSVs."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    result = load_comparison(out_dir)
    paths = []
    style = {"mws": ("MwS", "tab:blue"), "mwos": ("MwoS", "tab:orange")}

    def save(fig, path):
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        paths.append(path)

    for s in result.completed:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for arm, (label, color) in style.items():
            curve = getattr(s, arm)
            ax.plot(curve.column("epoch"), curve.column("val_dc"), label=label, color=color)
        ax.set(xlabel="epoch", ylabel="validation DC", title=f"seed {s.seed}", ylim=(0, 1))
        ax.legend(loc="lower right")
        fig.tight_layout()
        save(fig, out_dir / f"seed_{s.seed}" / "dc_curve.png")

    done = result.completed
    if done:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for arm, (label, color) in style.items():
            n = min(len(getattr(s, arm)) for s in done)
            mean = np.mean([getattr(s, arm).column("val_dc")[:n] for s in done], axis=0)
            ax.plot(range(n), moving_average(mean, window), label=label, color=color)
        ax.set(xlabel="epoch", ylabel="validation DC",
               title=f"mean of {len(done)} seeds, moving average {window}", ylim=(0, 1))
        ax.legend(loc="lower right")
        fig.tight_layout()
        save(fig, out_dir / "dc_curve_mean.png")
    return paths


# ---------------------------------------------------------------------------
# evaluation and export
# ---------------------------------------------------------------------------

Predictor = Callable[[CaseRecord], np.ndarray]


def network_predictor(ckpt) -> Predictor:
    store = load_checkpoint(ckpt)
    net = T.load_segmentation_net(store)
    return lambda rec: T.predict_probs(net, rec.image.data.astype(np.float32))


def _archives(case_dir) -> List[CaseRecord]:
    paths = list_archives(case_dir)
    if not paths:
        raise DataError(f"no case archives in {case_dir}")
    try:
        return [load_archive(p) for p in paths]
    except (VolumeError, OSError) as exc:
        raise DataError(str(exc)) from exc


def evaluate_records(records: Sequence[CaseRecord], predict: Predictor,
                     threshold: float = 0.5) -> List[MetricsReport]:
    reports = []
    for rec in records:
        if rec.mask is None:
            raise DataError(f"case {rec.case_id} has no ground-truth mask")
        reports.append(evaluate_case(predict(rec), rec.mask.binary(), rec.image.spacing,
                                     threshold, rec.pad, rec.case_id))
    return reports


def cmd_evaluate(ckpt, case_dir, out_dir=None, threshold: float = 0.5):
    """Per-case metrics of a segmentation checkpoint; returns ``(reports, aggregate)``."""
    if not Path(ckpt).exists():
        raise ConfigError(f"checkpoint {ckpt} does not exist")
    reports = evaluate_records(_archives(case_dir), network_predictor(ckpt), threshold)
    if out_dir is not None:
        write_reports(reports, out_dir)
    return reports, aggregate(reports)


def export_records(records: Sequence[CaseRecord], predict: Predictor, out_dir,
                   threshold: float = 0.5) -> List[Path]:
    out_dir = Path(out_dir)
    paths = []
    for rec in records:
        ref, shape = rec.meta.get("source_image"), rec.meta.get("original_shape")
        if ref is None or shape is None:
            raise DataError(f"case {rec.case_id} lacks original geometry metadata")
        if not Path(ref).exists():
            raise DataError(f"case {rec.case_id}: reference image {ref} is missing")
        labels = (rec.pad.unpad(np.asarray(predict(rec))) >= threshold).astype(np.uint8)
        labels = resample_to_shape(labels, tuple(shape))
        paths.append(save_mask_like(labels, ref, out_dir / f"{rec.case_id}.nii.gz"))
    return paths


def cmd_export_masks(ckpt, case_dir, out_dir, threshold: float = 0.5) -> List[Path]:
    """Binary prediction masks as NIfTI-1 on each case's original voxel grid."""
    if not Path(ckpt).exists():
        raise ConfigError(f"checkpoint {ckpt} does not exist")
    return export_records(_archives(case_dir), network_predictor(ckpt), out_dir, threshold)
