"""Synthetic cases written in the KiTS19 directory layout."""

from pathlib import Path

import nibabel as nib
import numpy as np

from kidney_ssl.phantom import PhantomSpec, generate_case

# native grid: working slice spacing, twice the in-plane resolution, stored x-flipped.
# Kidneys are roughly life-sized (about 50 x 30 x 26 mm semi-axes).
NATIVE_SPACING = (3.22, 0.81, 0.81)
NATIVE_SPEC = dict(dims=(64, 144, 256), spacing=NATIVE_SPACING, right_semi_axes=(16, 38, 32),
                   superior_offset=4, position_jitter=2)


def write_kits_case(root, index, seed=0, tumor=True, with_mask=True):
    """Write ``case_XXXXX/imaging.nii.gz`` + ``segmentation.nii.gz``; returns the zyx labels."""
    v, m = generate_case(PhantomSpec(seed=seed, **NATIVE_SPEC), index)
    kits = (m.data > 0).astype(np.uint8)
    if tumor:
        zz, yy, xx = np.nonzero(m.data == 1)
        c = (int(zz.mean()), int(yy.mean()), int(xx.mean()))
        kits[c[0] - 1:c[0] + 2, c[1] - 2:c[1] + 2, c[2] - 2:c[2] + 2] = 2
    # (z, y, x) -> (x, y, z) with the x axis reversed and a matching affine
    sz, sy, sx = NATIVE_SPACING
    nx = v.shape[2]
    affine = np.diag([-sx, sy, sz, 1.0])
    affine[0, 3] = (nx - 1) * sx
    img = np.transpose(v.data, (2, 1, 0))[::-1].astype(np.int16)
    seg = np.transpose(kits, (2, 1, 0))[::-1]
    d = Path(root) / f"case_{index:05d}"
    d.mkdir(parents=True, exist_ok=True)
    nib.save(nib.Nifti1Image(np.ascontiguousarray(img), affine), str(d / "imaging.nii.gz"))
    if with_mask:
        nib.save(nib.Nifti1Image(np.ascontiguousarray(seg), affine), str(d / "segmentation.nii.gz"))
    return m.data


def write_kits_dir(root, n=3, seed=0):
    return [write_kits_case(root, i, seed) for i in range(n)]
