import numpy as np
import pytest

from climgan.autodiff import Tensor, gradcheck, no_grad
from climgan.config import ConfigError, GeneratorConfig
from climgan.generator import (
    PUBLISHED_DECODER_SHAPES, PUBLISHED_DOWNSAMPLE_SHAPES, PUBLISHED_ENCODER_SHAPES, PUBLISHED_HEAD_SHAPE, SCSE,
    EncoderBlock, Generator, NoiseInjection, RandomSource, stage_extents, survival_schedule,
)


def tiny_cfg(**kw):
    base = dict(grid_h=4, grid_w=4, padded=4, stage_channels=(2, 3), lag=1, n_covariates=1,
                noise_dim=2, embed_dim=2, dropout_blocks=1, noise_init=0.0)
    base.update(kw)
    return GeneratorConfig(**base)


def inputs(cfg, n=2, seed=0):
    rng = np.random.default_rng(seed)
    cond = rng.standard_normal((n, cfg.cond_channels, cfg.grid_h, cfg.grid_w)).astype(np.float32)
    months = rng.integers(1, 13, n)
    z = rng.standard_normal((n, cfg.noise_dim)).astype(np.float32)
    return cond, months, z


@pytest.mark.parametrize("l,n,p", [(1, 5, 1.0), (5, 5, 0.5), (3, 5, 0.75), (2, 3, 0.75)])
def test_survival_schedule(l, n, p):
    assert survival_schedule(l, n) == p


def test_survival_schedule_rejects_single_block():
    with pytest.raises(ConfigError):
        survival_schedule(1, 1)


def test_published_shapes():
    cfg = GeneratorConfig()
    gen = Generator(cfg)
    trace = []
    gen(*inputs(cfg, 1), np.random.default_rng(0), train=False, trace=trace)
    hwc = lambda s: (s[2], s[3], s[1])
    assert [hwc(s) for k, s in trace if k == "encoder"] == PUBLISHED_ENCODER_SHAPES
    assert [hwc(s) for k, s in trace if k == "downsample"] == PUBLISHED_DOWNSAMPLE_SHAPES
    assert [hwc(s) for k, s in trace if k == "decoder"] == PUBLISHED_DECODER_SHAPES
    assert [hwc(s) for k, s in trace if k == "head"] == [PUBLISHED_HEAD_SHAPE]
    assert stage_extents(48, 5) == [48, 24, 12, 6, 3, 1]


def test_desk_output_extent(desk_cfg):
    cfg = desk_cfg.generator
    out = Generator(cfg)(*inputs(cfg), np.random.default_rng(0))
    assert out.shape == (2, 1, 16, 16)


def test_dropout_placement():
    gen = Generator(GeneratorConfig())
    assert [b.has_dropout for b in gen.encoders] == [False, False, True, True, True]
    assert [b.has_dropout for b in gen.decoders] == [True, True, True, False, False]


def test_decoder_survival_mirrors_encoder():
    gen = Generator(GeneratorConfig())
    enc = [b.survival for b in gen.encoders]
    assert enc == [1.0, 0.875, 0.75, 0.625, 0.5]
    assert [b.survival for b in gen.decoders] == enc[::-1]


def test_invalid_extents_rejected():
    with pytest.raises(ConfigError, match="downsampled"):
        Generator(tiny_cfg(grid_h=2, grid_w=2, padded=2))
    with pytest.raises(ConfigError):
        Generator(tiny_cfg(grid_h=50))


def test_eval_is_pure_function_of_context():
    cfg = tiny_cfg()
    gen = Generator(cfg)
    args = inputs(cfg)
    a = gen(*args, np.random.default_rng(1), train=False).data
    b = gen(*args, np.random.default_rng(2), train=False).data
    assert np.array_equal(a, b)


def test_eval_uses_every_block():
    # a per-sample source has no batch stream; stochastic depth would need one
    cfg = GeneratorConfig(grid_h=16, grid_w=16, padded=16, stage_channels=(4, 4, 4), lag=1, n_covariates=1)
    gen = Generator(cfg)
    for b in gen.encoders + gen.decoders:
        b.survival = 0.0
    cond, months, z = inputs(cfg)
    rs = RandomSource([np.random.default_rng(i) for i in range(2)])
    gen(cond, months, z, rs, train=False)
    with pytest.raises(RuntimeError):
        gen(cond, months, z, RandomSource([np.random.default_rng(i) for i in range(2)]), train=True)


def test_zero_main_branch_returns_projection():
    cfg = tiny_cfg()
    block = EncoderBlock(np.random.default_rng(0), 3, 4, 1.0, False, cfg)
    for unit in (block.conv1, block.conv2):
        unit.conv.weight.data[...] = 0
        unit.conv.bias.data[...] = 0
        unit.noise.scale.data[...] = 0
    x = Tensor(np.random.default_rng(1).standard_normal((2, 3, 4, 4)).astype(np.float32))
    block.train(True)
    out = block(x, RandomSource(np.random.default_rng(0)))
    np.testing.assert_allclose(out.data, block.proj(x).data, atol=1e-7)


def test_full_survival_is_deterministic_given_rng():
    cfg = tiny_cfg(noise_init=0.1)
    block = EncoderBlock(np.random.default_rng(0), 3, 4, 1.0, True, cfg)
    block.train(True)
    x = Tensor(np.random.default_rng(1).standard_normal((2, 3, 4, 4)).astype(np.float32))
    a = block(x, RandomSource(np.random.default_rng(9))).data
    b = block(x, RandomSource(np.random.default_rng(9))).data
    assert np.array_equal(a, b)


def test_noise_difference_variance():
    scale = 0.3
    layer = NoiseInjection(scale)
    x = Tensor(np.zeros((1000, 1, 1, 1), np.float32))
    a = layer(x, RandomSource(np.random.default_rng(1))).data
    b = layer(x, RandomSource(np.random.default_rng(2))).data
    assert not np.array_equal(a, b)
    assert np.var(a - b) == pytest.approx(2 * scale ** 2, rel=0.2)


def test_scse_saturated_gates_pass_input():
    m = SCSE(np.random.default_rng(0), 4, 2)
    m.fc2.bias.data[...] = 60.0
    m.spatial.bias.data[...] = 60.0
    x = np.random.default_rng(1).standard_normal((2, 4, 3, 3)).astype(np.float32)
    np.testing.assert_allclose(m(Tensor(x)).data, x, rtol=1e-6)
    np.testing.assert_array_equal(m(Tensor(np.zeros_like(x))).data, 0.0)


def test_scse_gradcheck():
    m = SCSE(np.random.default_rng(0), 4, 2)
    for p in m.parameters():
        p.data = p.data.astype(np.float64)
    x = np.random.default_rng(1).standard_normal((2, 4, 3, 3))
    assert gradcheck(lambda t: m(t), [x]) < 1e-3


def test_tiny_generator_gradcheck():
    cfg = tiny_cfg()
    gen = Generator(cfg, np.random.default_rng(3))
    for p in gen.parameters():
        p.data = p.data.astype(np.float64)
    gen.eval()
    cond, months, z = inputs(cfg, 1)
    fn = lambda c, zz: gen(c, months, zz, np.random.default_rng(0), train=False)
    assert gradcheck(fn, [cond, z]) < 2e-3


def test_noise_responsiveness_at_fixed_context():
    cfg = GeneratorConfig(grid_h=16, grid_w=16, padded=16, stage_channels=(4, 4, 4), lag=1, n_covariates=1)
    gen = Generator(cfg)
    assert all(float(s.data[0]) != 0 for s in gen.noise_scales())
    cond, months, _ = inputs(cfg, 1)
    rng = np.random.default_rng(5)
    outs = []
    with no_grad():
        for _ in range(100):
            outs.append(gen(cond, months, rng.standard_normal((1, cfg.noise_dim)), rng).data[0, 0])
    assert np.mean(np.std(outs, axis=0) > 0) > 0.5


def test_context_validation():
    cfg = tiny_cfg()
    gen = Generator(cfg)
    cond, months, z = inputs(cfg)
    with pytest.raises(ValueError):
        gen(cond[:, :1], months, z, np.random.default_rng(0))
    with pytest.raises(ValueError):
        gen(cond, np.array([0, 13]), z, np.random.default_rng(0))
