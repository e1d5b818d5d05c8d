import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from kidney_ssl.losses import (
    ContrastiveConfig,
    LossSchedule,
    composite_seg_loss,
    contrastive_loss,
    foreground_weight,
    schedule_weights,
    soft_dice_loss,
    weighted_bce,
)

from oracles import (
    central_difference,
    contrastive_oracle,
    relative_error,
    soft_dice_oracle,
    weighted_bce_oracle,
)


def pair_at_distance(d, dim=4):
    a = np.zeros(dim)
    b = np.zeros(dim)
    b[0] = d
    return a, b


@pytest.mark.parametrize("y,d,expected", [(1, 0.0, 0.0), (0, 1.0, 0.0), (0, 1.7, 0.0),
                                          (0, 0.4, 0.36), (1, 0.5, 0.25)])
def test_contrastive_analytic_cases(y, d, expected):
    a, b = pair_at_distance(d)
    assert float(contrastive_loss(a, b, y)) == pytest.approx(expected, abs=1e-12)


def test_contrastive_validation():
    with pytest.raises(ValueError, match="shape"):
        contrastive_loss(np.zeros(3), np.zeros(4), 1)
    with pytest.raises(ValueError):
        contrastive_loss(np.zeros(3), np.zeros(3), 2)
    with pytest.raises(ValueError):
        ContrastiveConfig(margin=0)


def test_contrastive_batch_sums_pairs():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    y = np.array([1, 0, 0, 1, 0])
    total = float(contrastive_loss(a, b, y))
    parts = sum(float(contrastive_loss(a[i], b[i], y[i])) for i in range(5))
    assert total == pytest.approx(parts, abs=1e-12)
    assert total == pytest.approx(contrastive_oracle(a, b, y), abs=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_contrastive_monotone_in_distance(d1, d2):
    if abs(d1 - d2) < 1e-6:
        return
    lo, hi = sorted((d1, d2))
    for y, sign in ((0, -1), (1, 1)):
        l_lo = float(contrastive_loss(*pair_at_distance(lo), y))
        l_hi = float(contrastive_loss(*pair_at_distance(hi), y))
        assert sign * (l_hi - l_lo) > 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 1))
def test_contrastive_nonnegative_and_symmetric(seed, y):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=6), rng.normal(size=6) * rng.uniform(0, 1)
    l_ab, l_ba = float(contrastive_loss(a, b, y)), float(contrastive_loss(b, a, y))
    assert l_ab >= 0 and l_ab == pytest.approx(l_ba, abs=1e-14)


def test_soft_dice_examples():
    g = np.zeros((4, 4, 4))
    g[:2] = 1
    assert float(soft_dice_loss(g, g)) == pytest.approx(0.0, abs=1e-6)
    assert float(soft_dice_loss(1 - g, g)) >= 1 - 1e-6
    p = np.full((4, 4, 4), 0.5)
    # 2 * 16 + eps over 32 + 32 + eps
    assert float(soft_dice_loss(p, g)) == pytest.approx(soft_dice_oracle(p, g), abs=1e-12)
    assert float(soft_dice_loss(p, g)) == pytest.approx(1 - (32 + 1e-5) / (64 + 1e-5), abs=1e-12)


def test_soft_dice_rejects_bad_probs():
    with pytest.raises(ValueError):
        soft_dice_loss(np.full(4, 1.5), np.ones(4))
    with pytest.raises(ValueError, match="shape"):
        soft_dice_loss(np.ones(4), np.ones(5))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_soft_dice_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    p = rng.random((3, 3, 3)) ** rng.uniform(0.2, 5)
    g = (rng.random((3, 3, 3)) < 0.5).astype(float)
    v = float(soft_dice_loss(p, g))
    assert 0.0 <= v <= 1.0


def test_weighted_bce_examples():
    g = np.zeros((4, 4, 4))
    g[1] = 1
    assert float(weighted_bce(g, g, 1.0)) <= -math.log(1 - 1e-7) + 1e-15
    mean_weight = (3.0 * g.sum() + (1 - g).sum()) / g.size
    assert float(weighted_bce(g, g, 3.0)) <= -mean_weight * math.log(1 - 1e-7) + 1e-15
    assert float(weighted_bce(np.full((4, 4, 4), 0.5), g, 1.0)) == pytest.approx(math.log(2), abs=1e-12)
    rng = np.random.default_rng(1)
    p = rng.random((4, 4, 4))
    assert float(weighted_bce(p, g, 2.5)) == pytest.approx(weighted_bce_oracle(p, g, 2.5), abs=1e-10)


def test_foreground_weight_clamps():
    g = np.zeros(1000)
    g[:10] = 1
    assert foreground_weight(g) == pytest.approx(100.0)
    g[:250] = 1
    assert foreground_weight(g) == pytest.approx(4.0)
    assert foreground_weight(np.ones(10)) == 1.0
    assert foreground_weight(np.zeros(10)) == 100.0


def test_schedule_examples():
    s = LossSchedule(total_epochs=21)
    assert schedule_weights(0, s) == (0.6, pytest.approx(0.4))
    assert schedule_weights(10, s) == (pytest.approx(0.5), pytest.approx(0.5))
    assert schedule_weights(20, s) == (pytest.approx(0.4), pytest.approx(0.6))
    with pytest.raises(ValueError):
        schedule_weights(21, s)
    with pytest.raises(ValueError):
        schedule_weights(-1, s)


@pytest.mark.parametrize("total", [1, 2, 7, 200])
def test_schedule_invariants(total):
    s = LossSchedule(total_epochs=total)
    prev = (math.inf, -math.inf)
    for e in range(total):
        w_bce, w_dice = schedule_weights(e, s)
        assert abs(w_bce + w_dice - 1) <= 1e-12
        assert w_bce <= prev[0] and w_dice >= prev[1]
        prev = (w_bce, w_dice)


def test_composite_breakdown():
    rng = np.random.default_rng(2)
    p = torch.tensor(rng.random((4, 4, 4)))
    g = torch.tensor((rng.random((4, 4, 4)) < 0.3).astype(float))
    x = torch.tensor(rng.normal(size=(4, 4, 4)))
    r = torch.tensor(rng.normal(size=(4, 4, 4)))
    s = LossSchedule(total_epochs=10)
    total, parts = composite_seg_loss(p, g, r, x, 0, s, lambda_rec=0.1)
    assert (parts["w_bce"], parts["w_dice"]) == (0.6, pytest.approx(0.4))
    recombined = (parts["w_bce"] * parts["loss_bce"] + parts["w_dice"] * parts["loss_dice"]
                  + parts["lambda_rec"] * parts["loss_recon"])
    assert abs(recombined - parts["loss_total"]) <= 1e-12
    _, last = composite_seg_loss(p, g, r, x, 9, s)
    assert (last["w_bce"], last["w_dice"]) == (pytest.approx(0.4), pytest.approx(0.6))
    total0, parts0 = composite_seg_loss(p, g, r, x, 3, s, lambda_rec=0.0)
    assert float(total0) == parts0["w_bce"] * float(weighted_bce(p, g, parts0["fg_weight"])) + \
        parts0["w_dice"] * float(soft_dice_loss(p, g))


def _grad(fn, x):
    t = torch.tensor(x, dtype=torch.float64, requires_grad=True)
    fn(t).backward()
    return t.grad.numpy()


@pytest.mark.parametrize("seed", range(5))
def test_loss_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=5), rng.normal(size=5) * 0.2
    for y in (0, 1):
        fa = lambda t: contrastive_loss(t, torch.tensor(b), y)
        num = central_difference(lambda v: float(fa(torch.tensor(v))), a)
        assert relative_error(_grad(fa, a), num) < 1e-5
    p = rng.uniform(0.05, 0.95, size=(3, 3, 3))
    g = (rng.random((3, 3, 3)) < 0.4).astype(float)
    for fn in (lambda t: soft_dice_loss(t, torch.tensor(g)),
               lambda t: weighted_bce(t, torch.tensor(g), 3.0)):
        num = central_difference(lambda v: float(fn(torch.tensor(v))), p)
        assert relative_error(_grad(fn, p), num) < 1e-5
