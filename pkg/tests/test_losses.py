import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from vddreg.core import BinaryMask, StyleTarget
from vddreg.errors import DimensionError
from vddreg.losses import (
    FeatureMap,
    StyleLossConfig,
    gram_matrix,
    mse_loss,
    rot90,
    self_comparison_loss,
    stage1_loss,
    stage1_terms,
    stage2_loss,
    stage2_terms,
    style_loss,
    style_loss_terms,
)
from vddreg.segmentation import PerceptualBackbone, build_network


def tiny_net(seed=0, dtype=torch.float64):
    return build_network(PerceptualBackbone("tiny", seed=seed), seed=seed).to(dtype)


def target(seed=0, n=16):
    r = np.random.default_rng(seed)
    return StyleTarget(BinaryMask((r.random((n, n)) < 0.2).astype(np.uint8)))


@given(st.integers(1, 6), st.integers(1, 9), st.integers(1, 9), st.integers(0, 10**6))
def test_gram_symmetric_psd(c, h, w, seed):
    f = np.random.default_rng(seed).normal(size=(c, h, w))
    g = gram_matrix(FeatureMap(f))
    np.testing.assert_allclose(g, g.T, atol=1e-12)
    assert np.linalg.eigvalsh(g).min() >= -1e-10
    # Oracle: explicit double sum.
    flat = f.reshape(c, -1)
    oracle = np.array([[np.dot(flat[i], flat[j]) for j in range(c)] for i in range(c)]) / (c * h * w)
    np.testing.assert_allclose(g, oracle, atol=1e-12)


def test_gram_torch_matches_numpy(rng):
    f = rng.normal(size=(3, 5, 4))
    t = gram_matrix(torch.from_numpy(f)).numpy()
    np.testing.assert_allclose(t, gram_matrix(f), atol=1e-12)
    tb = gram_matrix(torch.from_numpy(f)[None])
    assert tb.shape == (1, 3, 3)


def test_feature_map_dims():
    with pytest.raises(DimensionError):
        FeatureMap(np.zeros((0, 2, 2)))
    with pytest.raises(DimensionError):
        FeatureMap(np.zeros((2, 2)))


def test_mse_values():
    assert mse_loss(np.ones((4, 4)), np.zeros((4, 4))) == 1.0
    assert mse_loss(np.zeros((4, 4)), np.zeros((4, 4))) == 0.0
    with pytest.raises(DimensionError):
        mse_loss(np.zeros((4, 4)), np.zeros((4, 8)))


def test_rot90_exact():
    x = torch.arange(16.0).view(1, 1, 4, 4)
    assert torch.equal(rot90(rot90(x, 1), -1), x)
    assert torch.equal(rot90(x, 4), x)


def test_self_comparison_zero_for_equivariant_net():
    x = torch.rand(1, 1, 8, 8, dtype=torch.float64)
    assert self_comparison_loss(lambda t: t * 2.0, x).item() == 0.0


def test_self_comparison_positive_for_non_equivariant_net():
    x = torch.rand(1, 1, 8, 8, dtype=torch.float64)
    net = lambda t: torch.cumsum(t, dim=-1)  # noqa: E731
    assert self_comparison_loss(net, x).item() > 0


def test_style_loss_identity_is_zero():
    bb = PerceptualBackbone("tiny", seed=1).double()
    tg = target(1)
    x = torch.from_numpy(tg.mask.values.astype(np.float64))[None, None]
    assert style_loss(x, tg, bb).item() == pytest.approx(0.0, abs=1e-20)
    assert style_loss(np.zeros((16, 16)), tg, bb) > 0


def test_style_loss_terms_sum():
    bb = PerceptualBackbone("tiny", seed=1).double()
    x = torch.rand(1, 1, 16, 16, dtype=torch.float64)
    cfg = StyleLossConfig()
    terms = style_loss_terms(x, target(2), bb, cfg)
    assert set(terms) == set(cfg.taps)
    assert abs(sum(terms.values()).item() - style_loss(x, target(2), bb, cfg).item()) <= 1e-12


def test_stage1_recompose():
    net = tiny_net()
    x = torch.rand(1, 1, 16, 16, dtype=torch.float64)
    gt = (torch.rand(1, 1, 16, 16, dtype=torch.float64) > 0.8).double()
    cfg = StyleLossConfig(w_v=2.0, w_sc=0.5)
    t = stage1_terms(net, x, gt, cfg)
    total = stage1_loss(net, x, gt, cfg)
    assert abs(total.item() - (2.0 * t["mse"].item() + 0.5 * t["self_comparison"].item())) <= 1e-9


def test_stage2_recompose():
    net_e, net_o = tiny_net(0), tiny_net(1)
    bb = PerceptualBackbone("tiny", seed=2).double()
    xe = torch.rand(1, 1, 16, 16, dtype=torch.float64)
    xo = torch.rand(1, 1, 16, 16, dtype=torch.float64)
    cfg = StyleLossConfig()
    t = stage2_terms(net_e, net_o, xe, xo, target(), bb, cfg)
    manual = (cfg.w_st_e * t["style_e"] + cfg.w_st_o * t["style_o"]
              + cfg.w_sc * (t["sc_e"] + t["sc_o"])).item()
    assert abs(stage2_loss(net_e, net_o, xe, xo, target(), bb, cfg).item() - manual) <= 1e-9


def test_default_weights():
    cfg = StyleLossConfig()
    assert (cfg.w_st_e, cfg.w_st_o, cfg.w_sc, cfg.w_v) == (100.0, 1.0, 1e-3, 1.0)
    with pytest.raises(ValueError):
        StyleLossConfig(taps=("relu1_2",))
    with pytest.raises(ValueError):
        StyleLossConfig(w_sc=-1)


def _fd_check(loss_fn, net, eps=1e-6, n_params=40, seed=0):
    """Compare autograd against central differences on a random subset of parameters."""
    params = [p for p in net.parameters() if p.requires_grad]
    net.zero_grad()
    loss_fn().backward()
    grads = [p.grad.detach().clone() for p in params]
    r = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_params):
        k = int(r.integers(len(params)))
        idx = tuple(int(r.integers(s)) for s in params[k].shape)
        with torch.no_grad():
            old = params[k][idx].item()
            params[k][idx] = old + eps
            up = loss_fn().item()
            params[k][idx] = old - eps
            down = loss_fn().item()
            params[k][idx] = old
        fd = (up - down) / (2 * eps)
        an = grads[k][idx].item()
        denom = max(abs(fd), abs(an), 1e-6)
        worst = max(worst, abs(fd - an) / denom)
    return worst


def _generic_point(net, seed):
    # Zero biases put dead-ReLU pre-activations exactly on the kink, where finite
    # differences are meaningless; random biases move the check to a generic point.
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, torch.nn.Conv2d) and m.bias is not None:
                m.bias.copy_(0.1 * torch.randn(m.bias.shape, generator=g, dtype=m.bias.dtype))
    return net


def gradient_check_worst():
    torch.manual_seed(0)
    net = _generic_point(tiny_net(3), 3)
    assert sum(p.numel() for p in net.parameters()) <= 1000
    bb = PerceptualBackbone("tiny", seed=4).double()
    x = torch.rand(1, 1, 16, 16, dtype=torch.float64)
    xo = torch.rand(1, 1, 16, 16, dtype=torch.float64)
    gt = (torch.rand(1, 1, 16, 16, dtype=torch.float64) > 0.8).double()
    cfg = StyleLossConfig()
    w1 = _fd_check(lambda: stage1_loss(net, x, gt, cfg), net)
    net_o = _generic_point(tiny_net(5), 5)
    w2 = _fd_check(lambda: stage2_loss(net, net_o, x, xo, target(), bb, cfg), net, seed=1)
    return max(w1, w2)


def test_gradients_match_finite_differences():
    assert gradient_check_worst() <= 1e-3
