"""
Pairs of kidney crops for the same-side/opposite-side proxy task.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .volume import LabelMask, Volume

DESK_CROP = (32, 48, 48)
PAPER_CROP = (64, 112, 112)


class Side(enum.IntEnum):
    LEFT = 1
    RIGHT = 2


class ProxyDataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class KidneyCrop:
    data: np.ndarray
    side: Side
    case_id: str


@dataclass(frozen=True, eq=False)
class PairSample:
    crop_a: KidneyCrop
    crop_b: KidneyCrop
    y: int

    def __post_init__(self):
        if self.y != int(self.crop_a.side == self.crop_b.side):
            raise ProxyDataError("pair label does not match crop sides")


def split_sagittal(v: Volume, m: LabelMask, case_id: str = "?"):
    """
    Cut at ``x = dims_x // 2``. Returns ``((left_vol, left_mask), (right_vol, right_mask))``.
    """
    if not ((m.data == Side.LEFT).any() and (m.data == Side.RIGHT).any()):
        raise ProxyDataError(f"case {case_id}: mask must contain both kidneys")
    mid = v.shape[2] // 2
    halves = []
    for sl, own, other in ((slice(0, mid), Side.LEFT, Side.RIGHT),
                           (slice(mid, None), Side.RIGHT, Side.LEFT)):
        md = m.data[:, :, sl]
        if (md == other).any():
            raise ProxyDataError(f"case {case_id}: kidney label {int(other)} crosses "
                                 f"the sagittal midline")
        origin = v.origin if sl.start == 0 else \
            (v.origin[0], v.origin[1], v.origin[2] + mid * v.spacing[2])
        halves.append((Volume(v.data[:, :, sl], v.spacing, origin),
                       LabelMask(md, m.spacing, origin)))
    return halves[0], halves[1]


def centroid(m: LabelMask, side: Side) -> Tuple[int, int, int]:
    idx = np.argwhere(m.data == side)
    if idx.size == 0:
        raise ProxyDataError(f"no voxels with label {int(side)}")
    return tuple(int(c) for c in np.rint(idx.mean(axis=0)))


def crop_at(data: np.ndarray, center, crop_shape) -> np.ndarray:
    """Fixed-size window around ``center``; out-of-volume parts are zero."""
    out = np.zeros(crop_shape, dtype=data.dtype)
    src, dst = [], []
    for c, size, n in zip(center, crop_shape, data.shape):
        lo = c - size // 2
        s0, s1 = max(lo, 0), min(lo + size, n)
        if s1 <= s0:
            return out
        src.append(slice(s0, s1))
        dst.append(slice(s0 - lo, s1 - lo))
    out[tuple(dst)] = data[tuple(src)]
    return out


def extract_crop(v: Volume, m: LabelMask, side, crop_shape=DESK_CROP, case_id: str = "") -> KidneyCrop:
    side = Side(side)
    center = centroid(m, side)
    return KidneyCrop(crop_at(v.data, center, tuple(crop_shape)), side, case_id)


def case_crops(v: Volume, m: LabelMask, crop_shape=DESK_CROP, case_id: str = "") -> List[KidneyCrop]:
    """Both kidney crops of a case, after checking each sits in its own half."""
    split_sagittal(v, m, case_id)
    return [extract_crop(v, m, s, crop_shape, case_id) for s in (Side.LEFT, Side.RIGHT)]


def sample_pairs(crops: Sequence[KidneyCrop], n_pairs: int, same_fraction: float = 0.5,
                 seed: int = 0) -> List[PairSample]:
    """
    Draw ``n_pairs`` pairs, exactly ``round(n_pairs * same_fraction)`` of them same-side.

    Pairs may mix patients; a crop is never paired with itself and no
    unordered pair repeats. Same-side pairs alternate between the two sides.
    """
    left = [i for i, c in enumerate(crops) if c.side == Side.LEFT]
    right = [i for i, c in enumerate(crops) if c.side == Side.RIGHT]
    if not left or not right:
        raise ProxyDataError("need at least one crop of each side")
    n_same = int(round(n_pairs * same_fraction))
    n_diff = n_pairs - n_same
    n_same_left = (n_same + 1) // 2
    n_same_right = n_same - n_same_left
    avail = {
        "same_left": len(left) * (len(left) - 1) // 2,
        "same_right": len(right) * (len(right) - 1) // 2,
        "diff": len(left) * len(right),
    }
    need = {"same_left": n_same_left, "same_right": n_same_right, "diff": n_diff}
    for key in need:
        if need[key] > avail[key]:
            raise ProxyDataError(f"cannot draw {need[key]} distinct {key} pairs from "
                                 f"{len(left)} left / {len(right)} right crops")

    rng = np.random.default_rng(seed)

    def draw(pool_a, pool_b, count, same):
        seen, out = set(), []
        while len(out) < count:
            i = pool_a[rng.integers(len(pool_a))]
            j = pool_b[rng.integers(len(pool_b))]
            key = (min(i, j), max(i, j))
            if i == j or key in seen:
                continue
            seen.add(key)
            out.append((i, j))
        return out

    index_pairs = (draw(left, left, n_same_left, True) + draw(right, right, n_same_right, True)
                   + draw(left, right, n_diff, False))
    # random branch assignment so neither branch always sees the left kidney
    flips = rng.random(len(index_pairs)) < 0.5
    index_pairs = [(j, i) if f else (i, j) for (i, j), f in zip(index_pairs, flips)]
    order = rng.permutation(len(index_pairs))
    pairs = []
    for k in order:
        i, j = index_pairs[k]
        a, b = crops[i], crops[j]
        pairs.append(PairSample(a, b, int(a.side == b.side)))
    return pairs


def write_pair_manifest(pairs: Sequence[PairSample], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id_a", "side_a", "case_id_b", "side_b", "y"])
        for p in pairs:
            w.writerow([p.crop_a.case_id, p.crop_a.side.name, p.crop_b.case_id,
                        p.crop_b.side.name, p.y])
    return path
