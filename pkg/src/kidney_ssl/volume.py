"""
CT volume containers, NIfTI loading and the preprocessing chain.

Arrays are stored in (z, y, x) order: axial, coronal, sagittal. On load the
file is reoriented to the closest canonical RAS+ frame, so ``x`` increases
from the patient's left to right and ``z`` increases superiorly.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

ARCHIVE_VERSION = 1
KIDNEY_LABELS = (0, 1, 2)

#: Voxel spacing (mm) all cases are resampled to before training.
TARGET_SPACING = (3.22, 1.62, 1.62)
HU_WINDOW = (-80.0, 300.0)


class VolumeError(ValueError):
    """Raised for malformed volumes, masks or case files."""


@dataclass
class Volume:
    """A 3D intensity grid with physical voxel spacing and origin (mm)."""

    data: np.ndarray
    spacing: Tuple[float, float, float]
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise VolumeError(f"expected 3D data, got {self.data.ndim}D")
        if min(self.data.shape) < 1:
            raise VolumeError(f"empty volume of shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise VolumeError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass
class LabelMask:
    """Integer labels aligned with a :class:`Volume`: 0 background, 1 left kidney, 2 right kidney."""

    data: np.ndarray
    spacing: Tuple[float, float, float]
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise VolumeError(f"expected 3D mask, got {data.ndim}D")
        values = np.unique(data)
        bad = [int(v) for v in values if v not in KIDNEY_LABELS]
        if bad:
            raise VolumeError(f"unexpected label value(s) {bad}; allowed {KIDNEY_LABELS}")
        self.data = data.astype(np.uint8)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)

    def binary(self) -> np.ndarray:
        return (self.data > 0).astype(np.uint8)


@dataclass
class PadRecord:
    """Low/high zero-padding widths per axis, in voxels."""

    low: Tuple[int, int, int] = (0, 0, 0)
    high: Tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        self.low = tuple(int(w) for w in self.low)
        self.high = tuple(int(w) for w in self.high)
        if min(self.low + self.high) < 0:
            raise VolumeError("pad widths must be non-negative")

    def original_shape(self, padded_shape: Sequence[int]) -> Tuple[int, int, int]:
        return tuple(int(n) - lo - hi for n, lo, hi in zip(padded_shape, self.low, self.high))

    def unpad(self, array: np.ndarray) -> np.ndarray:
        """Strip the padding from the last three axes of ``array``."""
        index = tuple(
            slice(lo, n - hi) for n, lo, hi in zip(array.shape[-3:], self.low, self.high)
        )
        return array[(Ellipsis,) + index]

    def to_dict(self) -> dict:
        return {"low": list(self.low), "high": list(self.high)}

    @classmethod
    def from_dict(cls, d: dict) -> "PadRecord":
        return cls(tuple(d["low"]), tuple(d["high"]))


def _check_pair(v: Volume, m: Optional[LabelMask]):
    if m is not None and m.shape != v.shape:
        raise VolumeError(f"mask shape {m.shape} does not match image shape {v.shape}")


# ---------------------------------------------------------------------------
# NIfTI input
# ---------------------------------------------------------------------------

def _canonical_zyx(img):
    """Return (data in z,y,x order, spacing in z,y,x order, origin) for a nibabel image."""
    import nibabel as nib

    if len(img.shape) != 3:
        raise VolumeError(f"expected a 3D image, got shape {img.shape}")
    canon = nib.as_closest_canonical(img)
    data = np.asarray(canon.dataobj)
    zooms = canon.header.get_zooms()[:3]
    origin = canon.affine[:3, 3]
    return (
        np.ascontiguousarray(np.transpose(data, (2, 1, 0))),
        tuple(float(z) for z in zooms[::-1]),
        tuple(float(o) for o in origin[::-1]),
    )


def kits_to_sides(labels: np.ndarray) -> np.ndarray:
    """
    Convert a KiTS19 mask (1 kidney, 2 tumor) to left/right kidney labels.

    Tumor is merged into the kidney foreground; each connected component is
    then assigned to the side of the sagittal midline its centroid lies on.
    """
    fg = labels > 0
    comps, n = ndimage.label(fg)
    out = np.zeros(labels.shape, dtype=np.uint8)
    mid = labels.shape[2] / 2
    for idx in range(1, n + 1):
        sel = comps == idx
        cx = np.nonzero(sel)[2].mean()
        out[sel] = 1 if cx < mid else 2
    return out


def load_case(image_path, mask_path=None, label_scheme: str = "sides"):
    """
    Load an image (and optional mask) NIfTI-1 pair.

    ``label_scheme`` is ``"sides"`` for masks already labelled 1/2 by kidney
    side, or ``"kits"`` for raw KiTS19 kidney/tumor masks.

    Returns ``(Volume, LabelMask or None)``.
    """
    import nibabel as nib

    for p in (image_path, mask_path):
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(f"no such case file: {p}")
    try:
        img = nib.load(str(image_path))
    except Exception as exc:  # nibabel raises a zoo of types
        raise VolumeError(f"cannot parse {image_path}: {exc}") from exc
    data, spacing, origin = _canonical_zyx(img)
    volume = Volume(data.astype(np.float32), spacing, origin)
    if mask_path is None:
        return volume, None

    seg = nib.load(str(mask_path))
    if tuple(seg.shape) != tuple(img.shape):
        raise VolumeError(f"mask shape {seg.shape} does not match image shape {img.shape}")
    mdata, _, _ = _canonical_zyx(seg)
    mdata = np.rint(mdata).astype(np.int64)
    if label_scheme == "kits":
        mdata = kits_to_sides(mdata)
    elif label_scheme != "sides":
        raise ValueError(f"unknown label scheme {label_scheme!r}")
    mask = LabelMask(mdata, spacing, origin)
    return volume, mask


def save_mask_like(labels_zyx: np.ndarray, reference_path, out_path) -> Path:
    """
    Write a canonical (z, y, x) label grid as NIfTI-1 in the reference image's
    original orientation and header geometry.
    """
    import nibabel as nib
    from nibabel import orientations as ornt

    ref = nib.load(str(reference_path))
    canon_xyz = np.transpose(np.asarray(labels_zyx), (2, 1, 0))
    start = ornt.axcodes2ornt(("R", "A", "S"))
    end = ornt.io_orientation(ref.affine)
    data = ornt.apply_orientation(canon_xyz, ornt.ornt_transform(start, end))
    if tuple(data.shape) != tuple(ref.shape[:3]):
        raise VolumeError(f"mask shape {data.shape} does not match reference {ref.shape}")
    header = ref.header.copy()
    header.set_data_dtype(np.uint8)
    out = nib.Nifti1Image(np.ascontiguousarray(data).astype(np.uint8), ref.affine, header)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    nib.save(out, str(out_path))
    return out_path


# ---------------------------------------------------------------------------
# preprocessing steps
# ---------------------------------------------------------------------------

def resample_shape(shape, spacing, target_spacing):
    return tuple(int(round(n * s / t)) for n, s, t in zip(shape, spacing, target_spacing))


def _resample_array(data, spacing, target_spacing, out_shape, order):
    # voxel-center mapping: out index i sits at physical (i + 0.5) * t from the grid edge
    scale = np.array([t / s for s, t in zip(spacing, target_spacing)])
    offset = 0.5 * scale - 0.5
    out_dtype = data.dtype if order == 0 else np.result_type(data.dtype, np.float32)
    return _diag_transform(data.astype(out_dtype, copy=False), scale, offset, out_shape, order)


def _diag_transform(data, scale, offset, out_shape, order):
    with warnings.catch_warnings():
        # a 1-D matrix means "diagonal"; scipy warns about that historical change
        warnings.simplefilter("ignore", UserWarning)
        return ndimage.affine_transform(data, scale, offset=offset, output_shape=tuple(out_shape),
                                        order=order, mode="nearest")


def resample(v: Volume, m: Optional[LabelMask] = None, target_spacing=TARGET_SPACING):
    """
    Resample to ``target_spacing``; trilinear for the image, nearest for the mask.

    Output shape per axis is ``round(n * spacing / target)``.
    """
    _check_pair(v, m)
    target_spacing = tuple(float(t) for t in target_spacing)
    if len(target_spacing) != 3 or min(target_spacing) <= 0:
        raise VolumeError(f"target spacing must be positive, got {target_spacing}")
    if v.spacing == target_spacing:
        return (
            Volume(v.data.copy(), v.spacing, v.origin),
            None if m is None else LabelMask(m.data.copy(), m.spacing, m.origin),
        )
    out_shape = resample_shape(v.shape, v.spacing, target_spacing)
    if min(out_shape) < 1:
        raise VolumeError(f"resampling {v.shape} at {v.spacing} to {target_spacing} "
                          f"gives degenerate shape {out_shape}")
    origin = tuple(o + 0.5 * (t - s) for o, s, t in zip(v.origin, v.spacing, target_spacing))
    out = Volume(_resample_array(v.data, v.spacing, target_spacing, out_shape, 1),
                 target_spacing, origin)
    out_mask = None
    if m is not None:
        out_mask = LabelMask(_resample_array(m.data, v.spacing, target_spacing, out_shape, 0),
                             target_spacing, origin)
    return out, out_mask


def resample_to_shape(labels: np.ndarray, shape) -> np.ndarray:
    """Nearest-neighbour resampling of a label grid onto an exact output shape."""
    if tuple(labels.shape) == tuple(shape):
        return labels.copy()
    scale = np.array([a / b for a, b in zip(labels.shape, shape)])
    return _diag_transform(labels, scale, 0.5 * scale - 0.5, shape, 0)


def window_clip(v: Volume, lo: float = HU_WINDOW[0], hi: float = HU_WINDOW[1]) -> Volume:
    if not lo < hi:
        raise VolumeError(f"window bounds must satisfy lo < hi, got [{lo}, {hi}]")
    return Volume(np.clip(v.data, lo, hi), v.spacing, v.origin)


def normalize(v: Volume) -> Volume:
    """Zero-mean, unit-std normalization with statistics of this volume."""
    data = v.data.astype(np.float64)
    if data.size < 2:
        raise VolumeError("cannot normalize a single-voxel volume")
    std = data.std()
    if not std > 0:
        raise VolumeError("cannot normalize a constant volume (zero standard deviation)")
    out = (data - data.mean()) / std
    return Volume(out.astype(np.float32), v.spacing, v.origin)


def pad_to_multiple(v: Volume, m: Optional[LabelMask] = None, multiple: int = 16):
    """Zero-pad every axis up to the next multiple; the odd voxel goes on the high side."""
    _check_pair(v, m)
    if multiple < 1:
        raise VolumeError(f"multiple must be >= 1, got {multiple}")
    total = [int(math.ceil(n / multiple)) * multiple - n for n in v.shape]
    low = tuple(t // 2 for t in total)
    high = tuple(t - lo for t, lo in zip(total, low))
    record = PadRecord(low, high)
    widths = list(zip(low, high))
    origin = tuple(o - lo * s for o, lo, s in zip(v.origin, low, v.spacing))
    out = Volume(np.pad(v.data, widths), v.spacing, origin)
    out_mask = None if m is None else LabelMask(np.pad(m.data, widths), m.spacing, origin)
    return out, out_mask, record


def unpad(v: Volume, record: PadRecord) -> Volume:
    origin = tuple(o + lo * s for o, lo, s in zip(v.origin, record.low, v.spacing))
    return Volume(record.unpad(v.data), v.spacing, origin)


@dataclass
class PreprocessConfig:
    target_spacing: Tuple[float, float, float] = TARGET_SPACING
    window: Tuple[float, float] = HU_WINDOW
    pad_multiple: int = 16
    label_scheme: str = "sides"

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "PreprocessConfig":
        d = dict(d or {})
        for key in ("target_spacing", "window"):
            if key in d:
                d[key] = tuple(float(x) for x in d[key])
        return cls(**d)


def preprocess_volume(v: Volume, m: Optional[LabelMask], config: PreprocessConfig = None):
    """resample -> clip -> normalize -> pad, on in-memory arrays."""
    config = config or PreprocessConfig()
    v, m = resample(v, m, config.target_spacing)
    v = window_clip(v, *config.window)
    v = normalize(v)
    return pad_to_multiple(v, m, config.pad_multiple)


def preprocess_case(paths, config: PreprocessConfig = None):
    """
    Load and preprocess one case. ``paths`` is ``(image_path, mask_path_or_None)``.

    Returns ``(Volume, LabelMask or None, PadRecord)``.
    """
    config = config or PreprocessConfig()
    image_path, mask_path = paths
    v, m = load_case(image_path, mask_path, label_scheme=config.label_scheme)
    return preprocess_volume(v, m, config)


# ---------------------------------------------------------------------------
# case archives: <case_id>.npz (arrays) + <case_id>.json (metadata)
# ---------------------------------------------------------------------------

@dataclass
class CaseRecord:
    """A case as stored on disk: arrays plus the geometry needed to undo preprocessing."""

    case_id: str
    image: Volume
    mask: Optional[LabelMask] = None
    pad: PadRecord = field(default_factory=PadRecord)
    meta: dict = field(default_factory=dict)


def save_archive(record: CaseRecord, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {"image": record.image.data}
    if record.mask is not None:
        arrays["mask"] = record.mask.data
    npz_path = directory / f"{record.case_id}.npz"
    tmp = directory / f".{record.case_id}.tmp.npz"
    np.savez_compressed(tmp, **arrays)
    os.replace(tmp, npz_path)
    meta = {
        "version": ARCHIVE_VERSION,
        "case_id": record.case_id,
        "shape": list(record.image.shape),
        "spacing": list(record.image.spacing),
        "origin": list(record.image.origin),
        "pad": record.pad.to_dict(),
        "has_mask": record.mask is not None,
        **record.meta,
    }
    with open(directory / f"{record.case_id}.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return npz_path


def load_archive(path) -> CaseRecord:
    """Load ``<case>.npz`` (or its ``.json`` sidecar path, or the bare stem)."""
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".npz", ".json") else path
    meta_path, npz_path = stem.with_suffix(".json"), stem.with_suffix(".npz")
    if not (meta_path.exists() and npz_path.exists()):
        raise FileNotFoundError(f"incomplete archive {stem}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    if meta.get("version") != ARCHIVE_VERSION:
        raise VolumeError(f"{meta_path}: archive version {meta.get('version')} "
                          f"!= {ARCHIVE_VERSION}")
    try:
        with np.load(npz_path) as npz:
            image = npz["image"]
            mask = npz["mask"] if "mask" in npz.files else None
    except Exception as exc:
        raise VolumeError(f"corrupt archive {npz_path}: {exc}") from exc
    spacing, origin = tuple(meta["spacing"]), tuple(meta["origin"])
    volume = Volume(image, spacing, origin)
    label = None if mask is None else LabelMask(mask, spacing, origin)
    _check_pair(volume, label)
    extra = {k: v for k, v in meta.items()
             if k not in ("version", "case_id", "shape", "spacing", "origin", "pad", "has_mask")}
    return CaseRecord(meta["case_id"], volume, label, PadRecord.from_dict(meta["pad"]), extra)


def list_archives(directory):
    return sorted(p.with_suffix("") for p in Path(directory).glob("*.npz")
                  if not p.name.startswith("."))
