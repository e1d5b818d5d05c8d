"""
Two-stage training: siamese proxy training, encoder transfer, segmentation.

Both loops use batch size 1 and AdamW (Adam with decoupled weight decay).
The data order of epoch ``e`` is a permutation drawn from ``(seed, e)``, so a
resumed run visits samples in the same order as an uninterrupted one.
"""

from __future__ import annotations

import contextlib
import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch

from . import losses as L
from .metrics import dice
from .models import (
    ENCODER_PREFIX,
    ArchitectureConfig,
    ArchitectureError,
    ParameterStore,
    build_encoder,
    build_segmentation_net,
    build_siamese,
    load_checkpoint,
    load_into,
    save_checkpoint,
)
from .proxy_data import PairSample
from .volume import CaseRecord, PadRecord

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    """Raised when a loss becomes NaN or infinite."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-2
    batch_size: int = 1
    epochs: int = 200
    seed: int = 0
    split_fraction: float = 0.8
    margin: float = 1.0
    lambda_rec: float = 0.1
    threshold: float = 0.5

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.split_fraction < 1:
            raise ValueError("split_fraction must lie in (0, 1)")
        if self.batch_size != 1:
            raise ValueError("only batch size 1 is supported")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d or {}) - known
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**(d or {}))


@dataclass
class TrainingCurve:
    records: List[Dict[str, float]] = field(default_factory=list)

    def append(self, record: dict):
        if self.records and record["epoch"] <= self.records[-1]["epoch"]:
            raise ValueError("epochs must be strictly increasing")
        self.records.append(dict(record))

    def column(self, name) -> List[float]:
        return [r[name] for r in self.records]

    def __len__(self):
        return len(self.records)

    def write_csv(self, path, columns=None):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        columns = columns or (list(self.records[0]) if self.records else ["epoch"])
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
            w.writeheader()
            for r in self.records:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
        return path

    @classmethod
    def read_csv(cls, path) -> "TrainingCurve":
        curve = cls()
        with open(path) as fh:
            for row in csv.DictReader(fh):
                curve.append({k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()})
        return curve


SEG_COLUMNS = ["epoch", "loss_total", "loss_bce", "loss_dice", "loss_recon",
               "w_bce", "w_dice", "val_dc", "seconds"]
PROXY_COLUMNS = ["epoch", "loss", "val_accuracy", "val_dist_same", "val_dist_diff", "seconds"]


@contextlib.contextmanager
def deterministic_mode(threads: int = 1):
    """Single-threaded execution with PyTorch's deterministic kernels only."""
    prev_threads = torch.get_num_threads()
    prev_det = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev_det)
        torch.set_num_threads(prev_threads)


def split_cases(case_ids: Sequence[str], fraction: float = 0.8, seed: int = 0):
    """Random disjoint split with ``round(fraction * N)`` training cases."""
    ids = list(case_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("case ids must be unique")
    n_train = int(round(fraction * len(ids)))
    if len(ids) < 2 or not 0 < n_train < len(ids):
        raise ValueError(f"cannot split {len(ids)} cases at fraction {fraction} into two "
                         f"nonempty sets")
    order = np.random.default_rng(seed).permutation(len(ids))
    train = [ids[i] for i in sorted(order[:n_train])]
    val = [ids[i] for i in sorted(order[n_train:])]
    return train, val


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def make_optimizer(params, config: TrainConfig):
    return torch.optim.AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)


def _check_finite(loss, epoch, step, what):
    if not torch.isfinite(loss):
        raise TrainingDivergence(f"non-finite {what} loss {loss.item()} at epoch {epoch}, "
                                 f"step {step}")


def _as_input(array) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(array), dtype=torch.float32)[None, None]


class _RunState:
    """Checkpoint files of one training run."""

    def __init__(self, run_dir):
        self.dir = None if run_dir is None else Path(run_dir)
        if self.dir is not None:
            self.dir.mkdir(parents=True, exist_ok=True)

    @property
    def last(self):
        return self.dir / "last_state.pt"

    def save_last(self, model, opt, epoch, best_metric, best_epoch, curve):
        if self.dir is None:
            return
        state = {"model": model.state_dict(), "optimizer": opt.state_dict(), "epoch": epoch,
                 "best_metric": best_metric, "best_epoch": best_epoch, "curve": curve.records}
        tmp = self.dir / ".last_state.tmp"
        torch.save(state, tmp)
        tmp.replace(self.last)

    def load_last(self):
        if self.dir is None or not self.last.exists():
            return None
        return torch.load(self.last, weights_only=False)


def _resume(state, model, opt, curve):
    model.load_state_dict(state["model"])
    opt.load_state_dict(state["optimizer"])
    for r in state["curve"]:
        curve.append(r)
    return state["epoch"] + 1, state["best_metric"], state["best_epoch"]


# ---------------------------------------------------------------------------
# proxy stage
# ---------------------------------------------------------------------------

def _pair_tensors(pairs: Sequence[PairSample]):
    cache = {}

    def t(crop):
        key = id(crop)
        if key not in cache:
            cache[key] = _as_input(crop.data)
        return cache[key]

    return [(t(p.crop_a), t(p.crop_b), float(p.y)) for p in pairs]


def proxy_validation(siamese, pairs, margin: float):
    """Pair accuracy (same iff ``d < margin / 2``) and mean distances per label."""
    dists, labels = [], []
    siamese.eval()
    with torch.no_grad():
        for a, b, y in pairs:
            ea, eb = siamese(a, b)
            dists.append(float(L.embedding_distance(ea[0], eb[0])))
            labels.append(y)
    dists, labels = np.array(dists), np.array(labels)
    pred_same = dists < margin / 2
    acc = float((pred_same == (labels == 1)).mean())
    same = float(dists[labels == 1].mean()) if (labels == 1).any() else float("nan")
    diff = float(dists[labels == 0].mean()) if (labels == 0).any() else float("nan")
    return acc, same, diff


def train_proxy(pairs_train: Sequence[PairSample], pairs_val: Sequence[PairSample],
                arch: ArchitectureConfig, config: TrainConfig, run_dir=None, resume=False,
                on_epoch=None):
    """
    Train the siamese encoder with the contrastive loss.

    Returns ``(best ParameterStore, TrainingCurve)``; the store is the one with
    the highest validation pair accuracy (earliest epoch on ties).
    """
    if not pairs_train:
        raise ValueError("no training pairs")
    cfg = L.ContrastiveConfig(config.margin)
    siamese = build_siamese(build_encoder(arch, seed=config.seed))
    opt = make_optimizer(siamese.parameters(), config)
    train, val = _pair_tensors(pairs_train), _pair_tensors(pairs_val)
    run = _RunState(run_dir)
    curve = TrainingCurve()
    start, best_acc, best_epoch = 0, -1.0, -1
    best = None
    if resume and (state := run.load_last()) is not None:
        start, best_acc, best_epoch = _resume(state, siamese, opt, curve)
        best = load_checkpoint(run.dir / "best.npz") if best_epoch >= 0 else None

    for epoch in range(start, config.epochs):
        t0 = time.perf_counter()
        siamese.train()
        total = 0.0
        for step, k in enumerate(epoch_order(len(train), config.seed, epoch)):
            a, b, y = train[k]
            ea, eb = siamese(a, b)
            loss = L.contrastive_loss(ea, eb, torch.tensor([y], dtype=ea.dtype), cfg)
            if not torch.isfinite(loss):
                log.error("diverged on pair %d (%s/%s)", k, pairs_train[k].crop_a.case_id,
                          pairs_train[k].crop_b.case_id)
                _check_finite(loss, epoch, step, "contrastive")
            opt.zero_grad(set_to_none=False)
            loss.backward()
            opt.step()
            total += loss.item()
        acc, d_same, d_diff = proxy_validation(siamese, val, cfg.margin) if val else \
            (float("nan"),) * 3
        record = {"epoch": epoch, "loss": total / len(train), "val_accuracy": acc,
                  "val_dist_same": d_same, "val_dist_diff": d_diff,
                  "seconds": time.perf_counter() - t0}
        curve.append(record)
        if best is None or acc > best_acc:
            best_acc, best_epoch = acc, epoch
            best = ParameterStore.from_module(siamese, arch)
            if run.dir is not None:
                save_checkpoint(best, run.dir / "best.npz", kind="siamese",
                                extra={"epoch": epoch, "val_accuracy": acc})
        log.info("proxy epoch %d loss %.4f val_acc %.3f", epoch, record["loss"], acc)
        if run.dir is not None:
            curve.write_csv(run.dir / "curve.csv", PROXY_COLUMNS)
            save_checkpoint(ParameterStore.from_module(siamese, arch), run.dir / "final.npz",
                            kind="siamese", extra={"epoch": epoch})
        run.save_last(siamese, opt, epoch, best_acc, best_epoch, curve)
        if on_epoch is not None:
            on_epoch(epoch, siamese)
    return best, curve


def transfer_encoder(siamese_ckpt: Union[ParameterStore, str, Path]) -> ParameterStore:
    """
    The ``encoder.*`` subset of a siamese checkpoint, validated against a fresh
    segmentation network of the same architecture.
    """
    store = siamese_ckpt if isinstance(siamese_ckpt, ParameterStore) else \
        load_checkpoint(siamese_ckpt)
    if store.config is None:
        raise ArchitectureError("siamese checkpoint carries no architecture config")
    reference = build_segmentation_net(store.config).state_dict()
    expected = {k: tuple(v.shape) for k, v in reference.items() if k.startswith(ENCODER_PREFIX)}
    enc = store.subset(ENCODER_PREFIX)
    missing = sorted(set(expected) - set(enc))
    if missing:
        raise ArchitectureError(f"checkpoint lacks encoder parameters: {missing[:5]}")
    extra = sorted(set(enc) - set(expected))
    if extra:
        raise ArchitectureError(f"checkpoint has unknown encoder parameters: {extra[:5]}")
    for name, shape in expected.items():
        if tuple(np.shape(enc[name])) != shape:
            raise ArchitectureError(f"{name}: checkpoint shape {np.shape(enc[name])} "
                                    f"!= expected {shape}")
    return ParameterStore(((k, np.array(enc[k], copy=True)) for k in expected), config=store.config)


# ---------------------------------------------------------------------------
# segmentation stage
# ---------------------------------------------------------------------------

@dataclass
class SegCase:
    case_id: str
    image: np.ndarray  # preprocessed, padded
    mask: np.ndarray  # binary, padded
    spacing: tuple
    pad: PadRecord

    @classmethod
    def from_record(cls, rec: CaseRecord) -> "SegCase":
        if rec.mask is None:
            raise ValueError(f"case {rec.case_id} has no mask")
        return cls(rec.case_id, rec.image.data.astype(np.float32), rec.mask.binary(),
                   rec.image.spacing, rec.pad)


def predict_probs(net, image: np.ndarray) -> np.ndarray:
    net.eval()
    with torch.no_grad():
        logits, _ = net(_as_input(image))
    return torch.sigmoid(logits)[0, 0].numpy()


def validation_dice(net, cases: Sequence[SegCase], threshold=0.5) -> float:
    if not cases:
        return float("nan")
    scores = []
    for c in cases:
        pred = predict_probs(net, c.image) >= threshold
        scores.append(dice(c.pad.unpad(pred), c.pad.unpad(c.mask)))
    return float(np.mean(scores))


def train_segmentation(cases_train: Sequence[SegCase], cases_val: Sequence[SegCase],
                       init, arch: ArchitectureConfig, config: TrainConfig,
                       schedule: Optional[L.LossSchedule] = None, run_dir=None, resume=False,
                       on_epoch=None):
    """
    Train the segmentation network from ``init`` (``"random"`` or an encoder store).

    Returns ``(best ParameterStore, TrainingCurve)``; best = highest mean
    validation dice (earliest epoch on ties).
    """
    if not cases_train:
        raise ValueError("no training cases")
    schedule = schedule or L.LossSchedule(total_epochs=config.epochs)
    if schedule.total_epochs != config.epochs:
        raise ValueError("loss schedule length must equal the epoch budget")
    train_ids = {c.case_id for c in cases_train}
    val_ids = {c.case_id for c in cases_val}
    net = build_segmentation_net(arch, encoder_init=init, seed=config.seed)
    opt = make_optimizer(net.parameters(), config)
    inputs = [_as_input(c.image) for c in cases_train]
    targets = [_as_input(c.mask) for c in cases_train]
    fg_weights = [L.foreground_weight(c.mask) for c in cases_train]
    run = _RunState(run_dir)
    curve = TrainingCurve()
    start, best_dc, best_epoch = 0, -1.0, -1
    best = None
    if resume and (state := run.load_last()) is not None:
        start, best_dc, best_epoch = _resume(state, net, opt, curve)
        best = load_checkpoint(run.dir / "best.npz") if best_epoch >= 0 else None

    for epoch in range(start, config.epochs):
        if train_ids & val_ids:
            raise ValueError(f"validation cases in the training set: {sorted(train_ids & val_ids)}")
        t0 = time.perf_counter()
        net.train()
        sums = dict.fromkeys(("loss_total", "loss_bce", "loss_dice", "loss_recon"), 0.0)
        parts = {}
        for step, k in enumerate(epoch_order(len(inputs), config.seed, epoch)):
            x, g = inputs[k], targets[k]
            logits, recon = net(x)
            probs = torch.sigmoid(logits)
            loss, parts = L.composite_seg_loss(probs, g, recon, x, epoch, schedule,
                                               config.lambda_rec, fg_weights[k])
            if not torch.isfinite(loss):
                log.error("diverged on case %s", cases_train[k].case_id)
                _check_finite(loss, epoch, step, "segmentation")
            opt.zero_grad(set_to_none=False)
            loss.backward()
            opt.step()
            for key in sums:
                sums[key] += parts[key]
        val_dc = validation_dice(net, cases_val, config.threshold)
        record = {"epoch": epoch, **{k: v / len(inputs) for k, v in sums.items()},
                  "w_bce": parts["w_bce"], "w_dice": parts["w_dice"], "val_dc": val_dc,
                  "seconds": time.perf_counter() - t0}
        curve.append(record)
        if best is None or val_dc > best_dc:
            best_dc, best_epoch = val_dc, epoch
            best = ParameterStore.from_module(net, arch)
            if run.dir is not None:
                save_checkpoint(best, run.dir / "best.npz", kind="segmentation",
                                extra={"epoch": epoch, "val_dc": val_dc})
        log.info("seg epoch %d loss %.4f val_dc %.4f", epoch, record["loss_total"], val_dc)
        if run.dir is not None:
            curve.write_csv(run.dir / "curve.csv", SEG_COLUMNS)
            save_checkpoint(ParameterStore.from_module(net, arch), run.dir / "final.npz",
                            kind="segmentation", extra={"epoch": epoch})
        run.save_last(net, opt, epoch, best_dc, best_epoch, curve)
        if on_epoch is not None:
            on_epoch(epoch, net)
    return best, curve


def load_segmentation_net(store: ParameterStore):
    net = build_segmentation_net(store.config)
    return load_into(net, store)
