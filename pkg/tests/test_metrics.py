import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from kidney_ssl.metrics import (
    ConfusionCounts,
    boundary_count,
    boundary_length_diff,
    confusion,
    dice,
    evaluate_case,
    hausdorff,
)
from kidney_ssl.volume import PadRecord

from oracles import boundary_points_oracle, confusion_oracle, hausdorff_oracle


def test_confusion_examples():
    m = np.zeros((2, 2, 2), bool)
    m[0, 0, 0] = True
    assert confusion(m, m) == ConfusionCounts(1, 0, 0, 7)
    c = confusion(np.ones((2, 2, 2)), np.zeros((2, 2, 2)))
    assert (c.fp, c.tp, c.total) == (8, 0, 8)


def test_confusion_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        confusion(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


def test_confusion_matches_loop_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.random((8, 8, 8)) < 0.4, rng.random((8, 8, 8)) < 0.4
    c = confusion(a, b)
    assert (c.tp, c.fp, c.fn, c.tn) == confusion_oracle(a, b)


def test_dice_examples():
    a = np.zeros((4, 4, 4), bool)
    a[:2] = True
    assert dice(a, a) == 1.0
    assert dice(a, ~a) == 0.0
    assert dice(np.zeros_like(a), np.zeros_like(a)) == 1.0
    assert dice(a, np.zeros_like(a)) == 0.0
    pred = np.array([1, 1, 1, 0], bool).reshape(1, 1, 4)
    gt = np.array([1, 1, 0, 1], bool).reshape(1, 1, 4)  # TP=2, FP=1, FN=1
    assert dice(pred, gt) == pytest.approx(4 / 6)


def test_hausdorff_examples():
    a = np.zeros((5, 5, 8), bool)
    b = np.zeros((5, 5, 8), bool)
    a[2, 2, 1] = True
    b[2, 2, 4] = True
    assert hausdorff(a, a) == 0.0
    assert hausdorff(a, b, spacing=(1, 1, 2)) == pytest.approx(6.0)


def test_hausdorff_empty_errors_name_side():
    a = np.zeros((3, 3, 3), bool)
    b = a.copy()
    b[1, 1, 1] = True
    with pytest.raises(ValueError, match="prediction"):
        hausdorff(a, b)
    with pytest.raises(ValueError, match="ground-truth"):
        hausdorff(b, a)


def test_boundary_examples():
    solid = np.zeros((5, 5, 5), bool)
    solid[1:4, 1:4, 1:4] = True
    assert boundary_count(solid) == 26  # all but the centre voxel
    full = np.ones((3, 3, 3), bool)
    assert boundary_count(full) == 26  # volume faces count as background
    assert boundary_length_diff(solid, solid) == 0.0


def test_boundary_length_formula():
    gt = np.zeros((1, 1, 200), bool)
    gt[0, 0, :100] = True
    pred = np.zeros((1, 1, 200), bool)
    pred[0, 0, :110] = True
    # every voxel of a 1-voxel-thick line is a boundary voxel
    assert boundary_length_diff(pred, gt) == pytest.approx(10.0)
    with pytest.raises(ValueError, match="empty"):
        boundary_length_diff(gt, np.zeros_like(gt))


def test_random_pairs_match_oracles():
    rng = np.random.default_rng(1)
    for _ in range(25):
        shape = tuple(rng.integers(6, 11, size=3))
        a = rng.random(shape) < rng.uniform(0.1, 0.7)
        b = rng.random(shape) < rng.uniform(0.1, 0.7)
        a[0, 0, 0] = b[-1, -1, -1] = True
        spacing = tuple(rng.uniform(0.5, 3.0, size=3))
        assert hausdorff(a, b, spacing) == pytest.approx(hausdorff_oracle(a, b, spacing), abs=1e-9)
        assert boundary_count(a) == len(boundary_points_oracle(a))


masks = arrays(np.bool_, st.tuples(*[st.integers(2, 6)] * 3))


@settings(max_examples=60, deadline=None)
@given(masks, st.data())
def test_symmetry_and_translation(a, data):
    b = data.draw(arrays(np.bool_, a.shape))
    assert dice(a, b) == dice(b, a)
    if a.any() and b.any():
        assert hausdorff(a, b, (1, 2, 3)) == hausdorff(b, a, (1, 2, 3))
        # shifting both masks together inside a larger grid
        shift = data.draw(st.tuples(*[st.integers(0, 3)] * 3))
        big = tuple(n + 3 for n in a.shape)
        pa, pb = np.zeros(big, bool), np.zeros(big, bool)
        sl = tuple(slice(s, s + n) for s, n in zip(shift, a.shape))
        pa[sl], pb[sl] = a, b
        assert dice(pa, pb) == dice(a, b)
        # padding changes which voxels touch the grid faces, so compare padded shifts
        ref_a, ref_b = np.zeros(big, bool), np.zeros(big, bool)
        ref_sl = tuple(slice(1, 1 + n) for n in a.shape)
        ref_a[ref_sl], ref_b[ref_sl] = a, b
        if all(s >= 1 and s + n <= m - 1 for s, n, m in zip(shift, a.shape, big)):
            assert hausdorff(pa, pb) == pytest.approx(hausdorff(ref_a, ref_b), abs=1e-12)


def test_evaluate_case_perfect_and_threshold():
    gt = np.zeros((6, 6, 6), np.uint8)
    gt[2:5, 2:5, 2:5] = 1
    rep = evaluate_case(gt.astype(float), gt, (1, 1, 1))
    assert (rep.dc, rep.hd, rep.bl) == (1.0, 0.0, 0.0)
    probs = np.where(gt > 0, 0.6, 0.4)
    rep = evaluate_case(probs, gt, (1, 1, 1), threshold=0.5)
    assert rep.dc == 1.0


def test_evaluate_case_strips_padding_and_matches_oracles():
    rng = np.random.default_rng(3)
    gt = np.zeros((8, 10, 12), np.uint8)
    gt[2:6, 3:8, 3:9] = 1
    pred = gt.copy()
    pred[2, 3:8, 3:9] = 0  # erode one face
    pred[0, 0, 0] = 1
    rec = PadRecord((1, 0, 2), (1, 2, 0))
    padded_pred = np.pad(pred, list(zip(rec.low, rec.high))).astype(float)
    padded_gt = np.pad(gt, list(zip(rec.low, rec.high)))
    padded_pred[0, 0, 0] = 1.0  # padding region must be ignored
    spacing = (3.22, 1.62, 1.62)
    rep = evaluate_case(padded_pred, padded_gt, spacing, pad_record=rec)
    tp, fp, fn, _ = confusion_oracle(pred > 0, gt > 0)
    assert rep.dc == pytest.approx(2 * tp / (2 * tp + fp + fn))
    assert rep.hd == pytest.approx(hausdorff_oracle(pred > 0, gt > 0, spacing), abs=1e-9)
    b_pred, b_gt = len(boundary_points_oracle(pred > 0)), len(boundary_points_oracle(gt > 0))
    assert rep.bl == pytest.approx(100 * abs(b_pred - b_gt) / b_gt)


def test_evaluate_case_empty_prediction():
    gt = np.zeros((4, 4, 4), np.uint8)
    gt[1:3, 1:3, 1:3] = 1
    rep = evaluate_case(np.zeros((4, 4, 4)), gt, (1, 1, 1))
    assert rep.dc == 0.0 and rep.hd == float("inf") and rep.bl == 100.0
