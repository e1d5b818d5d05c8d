"""
Losses for both training stages.

All functions take probabilities or embeddings as tensors (numpy arrays are
converted) and return differentiable scalars. None of them touch network code.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Dict, Tuple

import numpy as np
import torch

BCE_CLAMP = 1e-7


@dataclass
class ContrastiveConfig:
    margin: float = 1.0

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError(f"margin must be positive, got {self.margin}")


@dataclass
class LossSchedule:
    """Linear per-epoch hand-over from BCE to dice; the two weights always sum to 1."""

    total_epochs: int = 200
    w_bce_start: float = 0.6
    w_dice_start: float = 0.4
    w_bce_end: float = 0.4
    w_dice_end: float = 0.6

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")
        for a, b in ((self.w_bce_start, self.w_dice_start), (self.w_bce_end, self.w_dice_end)):
            if abs(a + b - 1) > 1e-12:
                raise ValueError(f"loss weights must sum to 1, got {a} + {b}")
        if self.w_bce_end > self.w_bce_start:
            raise ValueError("the BCE weight may only decrease over training")

    @classmethod
    def from_dict(cls, d) -> "LossSchedule":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in (d or {}).items() if k in known})


def _t(x, like=None):
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if isinstance(like, torch.Tensor) else torch.float64
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def contrastive_loss(a, b, y, cfg: ContrastiveConfig = None):
    """
    Sum over pairs of ``y d^2 + (1 - y) max(0, m - d)^2`` with ``d = ||a - b||``.

    ``a`` and ``b`` are single embeddings ``(E,)`` or batches ``(N, E)``;
    ``y`` is 1 for same-side pairs and 0 otherwise.
    """
    cfg = cfg or ContrastiveConfig()
    a = _t(a)
    b = _t(b, a)
    if a.shape != b.shape:
        raise ValueError(f"embedding shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == 1:
        a, b = a[None], b[None]
    y = _t(y, a).reshape(-1).to(a.dtype)
    if y.numel() != a.shape[0]:
        raise ValueError(f"{y.numel()} labels for {a.shape[0]} pairs")
    if not bool(((y == 0) | (y == 1)).all()):
        raise ValueError("labels must be 0 or 1")
    sq = ((a - b) ** 2).sum(dim=1)
    # sqrt has an infinite derivative at 0; the y=1 term only needs d^2
    d = torch.sqrt(torch.clamp(sq, min=1e-24))
    hinge = torch.clamp(cfg.margin - d, min=0.0)
    return (y * sq + (1 - y) * hinge ** 2).sum()


def embedding_distance(a, b):
    a, b = _t(a), _t(b, _t(a))
    return torch.linalg.vector_norm(a - b, dim=-1)


def _check_probs(probs, target):
    if probs.shape != target.shape:
        raise ValueError(f"shape mismatch: probs {tuple(probs.shape)} vs target {tuple(target.shape)}")


def soft_dice_loss(probs, target, eps: float = 1e-5):
    """``1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)``."""
    probs = _t(probs)
    target = _t(target, probs).to(probs.dtype)
    _check_probs(probs, target)
    if bool((probs < 0).any()) or bool((probs > 1).any()):
        raise ValueError("probabilities must lie in [0, 1]")
    inter = (probs * target).sum()
    return 1 - (2 * inter + eps) / (probs.sum() + target.sum() + eps)


def foreground_weight(target, lo: float = 1.0, hi: float = 100.0) -> float:
    """Inverse foreground frequency of ``target``, clamped to ``[lo, hi]``."""
    target = np.asarray(target.detach().cpu() if isinstance(target, torch.Tensor) else target)
    frac = float((target > 0).mean())
    if frac == 0:
        return hi
    return float(np.clip(1.0 / frac, lo, hi))


def weighted_bce(probs, target, fg_weight: float = 1.0):
    """Mean of ``-[w g log p + (1 - g) log(1 - p)]`` with ``p`` clamped to ``[1e-7, 1 - 1e-7]``."""
    if not fg_weight > 0:
        raise ValueError("fg_weight must be positive")
    probs = _t(probs)
    target = _t(target, probs).to(probs.dtype)
    _check_probs(probs, target)
    p = torch.clamp(probs, BCE_CLAMP, 1 - BCE_CLAMP)
    return -(fg_weight * target * torch.log(p) + (1 - target) * torch.log(1 - p)).mean()


def schedule_weights(epoch: int, schedule: LossSchedule) -> Tuple[float, float]:
    """``(w_bce, w_dice)`` at ``epoch``; linear from the start pair (epoch 0) to the end pair (last epoch)."""
    if not 0 <= epoch < schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    frac = epoch / (schedule.total_epochs - 1) if schedule.total_epochs > 1 else 0.0
    w_bce = schedule.w_bce_start + frac * (schedule.w_bce_end - schedule.w_bce_start)
    return w_bce, 1.0 - w_bce


def composite_seg_loss(probs, target, recon, input_volume, epoch: int, schedule: LossSchedule,
                       lambda_rec: float = 0.1, fg_weight=None) -> Tuple[torch.Tensor, Dict[str, float]]:
    """
    ``w_bce * BCE + w_dice * dice + lambda_rec * MSE(recon, input)``.

    ``fg_weight`` defaults to :func:`foreground_weight` of the target.
    Returns the total and a breakdown of the terms and weights.
    """
    w_bce, w_dice = schedule_weights(epoch, schedule)
    if fg_weight is None:
        fg_weight = foreground_weight(target)
    bce = weighted_bce(probs, target, fg_weight)
    dice = soft_dice_loss(probs, target)
    total = w_bce * bce + w_dice * dice
    rec = None
    if lambda_rec:
        recon = _t(recon, _t(probs))
        rec = ((recon - _t(input_volume, recon)) ** 2).mean()
        total = total + lambda_rec * rec
    breakdown = {
        "loss_total": total.item(),
        "loss_bce": bce.item(),
        "loss_dice": dice.item(),
        "loss_recon": 0.0 if rec is None else rec.item(),
        "w_bce": w_bce,
        "w_dice": w_dice,
        "lambda_rec": float(lambda_rec),
        "fg_weight": float(fg_weight),
    }
    return total, breakdown
