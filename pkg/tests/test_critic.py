import numpy as np
import pytest

from climgan.autodiff import Tensor, gradcheck
from climgan.config import ConfigError, CriticConfig, GeneratorConfig
from climgan.critic import SNConv2d, Critic, power_iteration, spectral_normalize


def tiny():
    gcfg = GeneratorConfig(grid_h=6, grid_w=6, padded=8, stage_channels=(2, 2), lag=1, n_covariates=1)
    ccfg = CriticConfig(base_filters=(3,), base_strides=(1,), head_filters=2)
    return ccfg, gcfg


def batch(gcfg, n=2, scale=1.0, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 1, gcfg.grid_h, gcfg.grid_w)) * scale
    cond = rng.standard_normal((n, gcfg.cond_channels, gcfg.grid_h, gcfg.grid_w)) * scale
    return x.astype(np.float32), cond.astype(np.float32)


def test_published_shapes():
    shapes = Critic(CriticConfig(), GeneratorConfig()).shapes
    assert [shapes[f"base{i}"] for i in range(3)] == [(19, 22, 32), (10, 11, 64), (5, 6, 128)]
    assert shapes["patch1"] == (4, 5, 1)
    assert shapes["frame0"] == (4, 5, 256) and shapes["frame2"] == (2, 2, 1)


def test_layer_hyperparameters():
    c = Critic(CriticConfig(), GeneratorConfig())
    assert [(l.conv.k, l.conv.stride, l.conv.padding) for l in c.base] == [(3, 2, 1)] * 3
    assert [(l.conv.k, l.conv.stride, l.conv.padding) for l in c.frame] == [(2, 1, 0), (2, 2, 0), (2, 2, 1)]
    assert [(l.conv.k, l.conv.stride, l.conv.padding) for l in c.patch] == [(2, 1, 0), (1, 1, 0)]
    assert all(l.slope == 0.2 for l in c.base + c.frame + c.patch)
    assert [l.norm is not None for l in c.frame] == [True, True, False]
    assert c.base[0].conv.cin == 1 + GeneratorConfig().cond_channels


def test_collapsing_grid_rejected():
    with pytest.raises(ConfigError):
        Critic(CriticConfig(), GeneratorConfig(grid_h=6, grid_w=6, padded=8, stage_channels=(2, 2)))


def test_diag_power_iteration():
    w = np.diag([3.0, 1.0])
    u0 = np.random.default_rng(0).standard_normal(2)
    _, _, sigma = power_iteration(w, u0, 20)
    assert 2.85 <= sigma <= 3.0
    wn, _, _ = spectral_normalize(w, u0, 20)
    assert np.linalg.svd(wn, compute_uv=False)[0] == pytest.approx(1.0, abs=1e-3)


def test_identity_weight_unchanged():
    wn, _, sigma = spectral_normalize(np.eye(4), np.ones(4), 1)
    assert sigma == pytest.approx(1.0)
    np.testing.assert_allclose(wn, np.eye(4))


def test_scale_invariance():
    rng = np.random.default_rng(1)
    w = rng.standard_normal((4, 6))
    u = rng.standard_normal(4)
    a, _, _ = spectral_normalize(w, u, 30)
    b, _, _ = spectral_normalize(10 * w, u, 30)
    assert np.max(np.abs(a - b)) < 1e-3


def test_operator_norm_after_normalization():
    c = Critic(CriticConfig(), GeneratorConfig())
    for layer in c.sn_layers():
        w = layer.effective_weight().data.reshape(layer.weight.shape[0], -1)
        assert np.linalg.svd(w, compute_uv=False)[0] <= 1 + 1e-2


def test_power_iteration_tracks_buffers():
    layer = SNConv2d(np.random.default_rng(0), 2, 3, 3, warmup=0)
    before = layer.buffers["u"].copy()
    layer.power_iterate(1)
    assert not np.array_equal(before, layer.buffers["u"])
    sig = float(layer.sigma().data)
    assert sig == pytest.approx(float(layer.buffers["u"] @ layer.matrix() @ layer.buffers["v"]), rel=1e-5)


def test_zero_weights_give_zero():
    ccfg, gcfg = tiny()
    c = Critic(ccfg, gcfg)
    for p in c.parameters():
        p.data[...] = 0
    out = c(Tensor(batch(gcfg)[0]), batch(gcfg)[1])
    np.testing.assert_array_equal(out.data, 0.0)


def test_heads_combine_frame_and_patch_mean():
    ccfg, gcfg = tiny()
    c = Critic(ccfg, gcfg)
    c.frame[-1].conv.weight.data[...] = 0
    c.frame[-1].conv.bias.data[...] = 0.25
    c.patch[-1].conv.weight.data[...] = 0
    c.patch[-1].conv.bias.data[...] = -1.5
    x, cond = batch(gcfg)
    np.testing.assert_allclose(c(Tensor(x), cond).data, [-1.25, -1.25])


def test_large_inputs_stay_finite():
    c = Critic(CriticConfig(base_filters=(8, 16, 16), base_strides=(2, 1, 1), head_filters=16),
               GeneratorConfig(grid_h=16, grid_w=16, padded=16, stage_channels=(8, 16, 16), lag=2, n_covariates=3))
    x, cond = batch(c.gen_cfg, n=4, scale=10.0)
    out = c(Tensor(x), cond)
    assert out.shape == (4,)
    assert np.all(np.isfinite(out.data))


def test_critic_gradcheck():
    ccfg, gcfg = tiny()
    c = Critic(ccfg, gcfg, np.random.default_rng(4))
    for p in c.parameters():
        p.data = p.data.astype(np.float64)
    x, cond = batch(gcfg, n=1)
    assert gradcheck(lambda a, b: c(a, b), [x, cond]) < 1e-3


def test_misaligned_conditioning_rejected():
    ccfg, gcfg = tiny()
    c = Critic(ccfg, gcfg)
    x, cond = batch(gcfg)
    with pytest.raises(ValueError):
        c(Tensor(x), cond[:1])
