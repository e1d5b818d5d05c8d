import numpy as np
import pytest
import torch
import torch.nn.functional as F

from kidney_ssl import _conv
from kidney_ssl.models import (
    ArchitectureConfig,
    ArchitectureError,
    ParameterStore,
    build_encoder,
    build_segmentation_net,
    build_siamese,
    init_random,
    load_checkpoint,
    load_into,
    preset,
    read_checkpoint_header,
    save_checkpoint,
)

from oracles import central_difference, relative_error

SMALL = ArchitectureConfig(growth_rate=4, stem_channels=4, norm_groups=4,
                           decoder_channels=[8, 8, 4, 4])
TINY = preset("tiny")


def rand_input(shape, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return torch.randn((1, 1) + tuple(shape), generator=g, dtype=dtype)


def test_feature_shapes_and_embedding():
    enc = build_encoder(SMALL, seed=0)
    feats, emb = enc(rand_input((32, 48, 48)))
    spatial = [tuple(f.shape[2:]) for f in feats]
    assert spatial == [(16, 24, 24), (8, 12, 12), (4, 6, 6), (2, 3, 3)]
    assert [f.shape[1] for f in feats] == SMALL.feature_channels
    assert emb.shape == (1, SMALL.embedding_size)
    torch.testing.assert_close(emb, feats[-1].mean(dim=(2, 3, 4)))


def test_segmentation_output_shapes():
    net = build_segmentation_net(SMALL, seed=0)
    x = rand_input((16, 32, 48))
    seg, recon = net(x)
    assert seg.shape == x.shape and recon.shape == x.shape


@pytest.mark.parametrize("shape", [(20, 32, 32), (16, 32, 33)])
def test_rejects_non_multiple_of_16(shape):
    with pytest.raises(ArchitectureError, match="16"):
        build_encoder(SMALL, seed=0)(rand_input(shape))


def test_rejects_bad_channel_layout():
    with pytest.raises(ArchitectureError):
        build_encoder(SMALL, seed=0)(torch.zeros(1, 2, 16, 16, 16))
    with pytest.raises(ArchitectureError, match="divide"):
        ArchitectureConfig(growth_rate=4, stem_channels=4, norm_groups=8)


def test_channel_arithmetic():
    cfg = ArchitectureConfig()
    c = cfg.stem_channels
    for (cin, cdense, cout), n in zip(cfg.encoder_channels(), cfg.block_layer_counts):
        assert cin == c and cdense == cin + n * cfg.growth_rate
        assert cout >= cdense / 2 and cout % cfg.norm_groups == 0
        c = cout


def _dense_param_count(cfg):
    enc = build_encoder(cfg)
    return sum(p.numel() for p in enc.blocks.parameters())


def test_doubling_growth_rate_parameter_audit():
    """Dense-layer conv weights grow with k * (c_in): explicit count vs. module count."""
    for cfg in (SMALL, ArchitectureConfig(growth_rate=8, stem_channels=4, norm_groups=4)):
        expected = 0
        for (cin, _, _), n in zip(cfg.encoder_channels(), cfg.block_layer_counts):
            for i in range(n):
                c = cin + i * cfg.growth_rate
                expected += 2 * c  # GroupNorm scale and offset
                expected += c * cfg.growth_rate * 27 + cfg.growth_rate
        assert _dense_param_count(cfg) == expected


def test_siamese_shares_one_encoder():
    sia = build_siamese(build_encoder(SMALL, seed=1))
    a, b = rand_input((16, 32, 32), 1), rand_input((16, 32, 32), 2)
    ea, eb = sia(a, a)
    assert torch.equal(ea, eb)
    e1, e2 = sia(a, b)
    f2, f1 = sia(b, a)
    assert torch.equal(e1, f1) and torch.equal(e2, f2)
    # one parameter set, so an update moves both branches together
    assert len(list(sia.parameters())) == len(list(sia.encoder.parameters()))
    opt = torch.optim.SGD(sia.parameters(), lr=0.1)
    (e1.sum() - e2.sum()).backward()
    opt.step()
    ea, eb = sia(a, a)
    assert torch.equal(ea, eb)


def test_skip_ablation_changes_output():
    net = build_segmentation_net(SMALL, seed=0)
    x = rand_input((16, 32, 32))
    with torch.no_grad():
        s1, r1 = net(x)
        s2, r2 = net(x, use_skips=False)
    assert not torch.equal(s1, s2)
    assert torch.equal(r1, r2)  # the reconstruction path has no skips


def test_init_is_deterministic_and_norms_are_identity():
    a = init_random(SMALL, 3)
    b = init_random(SMALL, 3)
    c = init_random(SMALL, 4)
    assert list(a) == list(b)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a if k.endswith("weight"))
    net = build_segmentation_net(SMALL, seed=3)
    for m in net.modules():
        if isinstance(m, torch.nn.GroupNorm):
            assert torch.all(m.weight == 1) and torch.all(m.bias == 0)


def test_outputs_finite_across_seeds():
    x = rand_input((16, 16, 16), 0)
    for seed in range(100):
        net = build_segmentation_net(TINY, seed=seed)
        with torch.no_grad():
            seg, recon = net(x)
        assert torch.isfinite(seg).all() and torch.isfinite(recon).all()


def test_encoder_names_are_a_prefix_subset():
    seg_names = set(init_random(SMALL, 0, "segmentation"))
    sia_names = set(init_random(SMALL, 0, "siamese"))
    assert sia_names == {k for k in seg_names if k.startswith("encoder.")}
    with pytest.raises(ValueError):
        init_random(SMALL, 0, "other")


def test_build_with_encoder_store_and_errors():
    sia = init_random(SMALL, 5, "siamese")
    net = build_segmentation_net(SMALL, encoder_init=sia, seed=0)
    state = net.state_dict()
    assert all(np.array_equal(state[k].numpy(), v) for k, v in sia.items())
    with pytest.raises(ArchitectureError, match="non-encoder"):
        build_segmentation_net(SMALL, encoder_init=init_random(SMALL, 0), seed=0)
    partial = ParameterStore(list(sia.items())[:-1], config=SMALL)
    with pytest.raises(ArchitectureError):
        build_segmentation_net(SMALL, encoder_init=partial, seed=0)


def test_load_into_checks_shapes():
    store = init_random(SMALL, 0, "siamese")
    name = next(iter(store))
    store[name] = np.zeros((1,) + store[name].shape)
    with pytest.raises(ArchitectureError, match="shape"):
        load_into(build_siamese(build_encoder(SMALL)), store)


def test_checkpoint_round_trip(tmp_path):
    store = init_random(SMALL, 2)
    path = save_checkpoint(store, tmp_path / "c.npz", kind="segmentation", extra={"epoch": 3})
    back = load_checkpoint(path, SMALL)
    assert list(back) == list(store)
    assert all(np.array_equal(back[k], store[k]) for k in store)
    assert back.config == SMALL
    assert read_checkpoint_header(path)["epoch"] == 3
    with pytest.raises(ArchitectureError, match="match"):
        load_checkpoint(path, preset("desk"))
    (tmp_path / "bad.npz").write_bytes(b"garbage")
    with pytest.raises(ArchitectureError, match="corrupt"):
        load_checkpoint(tmp_path / "bad.npz")


@pytest.mark.parametrize("stride,padding,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)])
def test_fast_conv_matches_reference(stride, padding, k):
    if not _conv.ENABLED:
        pytest.skip("oneDNN unavailable")
    g = torch.Generator().manual_seed(0)
    x = torch.randn(1, 3, 8, 10, 12, generator=g, requires_grad=True)
    w = torch.randn(5, 3, k, k, k, generator=g, requires_grad=True)
    b = torch.randn(5, generator=g, requires_grad=True)
    out = _conv.conv3d(x, w, b, (stride,) * 3, (padding,) * 3)
    ref = F.conv3d(x, w, b, stride, padding)
    torch.testing.assert_close(out, ref, rtol=1e-4, atol=1e-4)
    go = torch.randn(out.shape, generator=g)
    grads = torch.autograd.grad(out, (x, w, b), go)
    ref_grads = torch.autograd.grad(ref, (x, w, b), go)
    for a, r in zip(grads, ref_grads):
        torch.testing.assert_close(a, r, rtol=1e-4, atol=1e-3)


def test_transpose_conv_matches_reference():
    g = torch.Generator().manual_seed(1)
    up = _conv.ConvTranspose3d(3, 2, 2)
    with torch.no_grad():
        up.weight.copy_(torch.randn(up.weight.shape, generator=g))
        up.bias.copy_(torch.randn(up.bias.shape, generator=g))
    x = torch.randn(1, 3, 2, 3, 4, generator=g)
    ref = F.conv_transpose3d(x, up.weight, up.bias, stride=2)
    torch.testing.assert_close(up(x), ref, rtol=1e-5, atol=1e-5)


def _flat_grad_check(net, x, loss_fn, n_params=40, seed=0):
    """Compare autograd to central differences on a random subset of weights."""
    params = [p for p in net.parameters() if p.requires_grad]
    loss = loss_fn(net, x)
    grads = torch.autograd.grad(loss, params)
    rng = np.random.default_rng(seed)
    analytic, numeric = [], []
    for _ in range(n_params):
        i = int(rng.integers(len(params)))
        p, gp = params[i], grads[i]
        j = int(rng.integers(p.numel()))
        flat = p.data.view(-1)
        old = flat[j].item()

        def f(v):
            flat[j] = float(v[0])
            with torch.no_grad():
                return float(loss_fn(net, x))

        numeric.append(central_difference(f, np.array([old]))[0])
        flat[j] = old
        analytic.append(gp.reshape(-1)[j].item())
    return relative_error(np.array(analytic), np.array(numeric))


def test_tiny_network_gradients_float64():
    net = build_segmentation_net(TINY, seed=0, dtype=torch.float64)
    x = rand_input((16, 16, 16), 3, torch.float64)
    target = (x > 0.5).double()

    def loss_fn(n, inp):
        seg, recon = n(inp)
        p = torch.sigmoid(seg)
        return ((p - target) ** 2).mean() + 0.1 * ((recon - inp) ** 2).mean()

    assert _flat_grad_check(net, x, loss_fn) < 1e-4
