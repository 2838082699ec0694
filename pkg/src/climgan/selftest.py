"""Built-in checks: primitive gradchecks, double backward, conv adjointness, architecture shapes."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .autodiff import Tensor, double_backward_check, gradcheck, ops
from .autodiff import functional as F

GRAD_TOL = 1e-3
DOUBLE_TOL = 5e-3


def primitive_cases(seed: int) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    """name -> (function of Tensors, input arrays) covering the primitive suite."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 5, 5))
    pos = rng.uniform(0.5, 2.0, (3, 4))
    # keep away from kinks so central differences stay on one side
    kinked = rng.standard_normal((3, 4))
    kinked = np.where(np.abs(kinked) < 0.05, 0.1, kinked)
    w = rng.standard_normal((4, 3, 3, 3)) * 0.3
    wt = rng.standard_normal((3, 4, 2, 2)) * 0.3
    b = rng.standard_normal(4)
    gam, bet = rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)
    a2, b2 = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    return {
        "conv2d": (lambda x, w, b: F.conv2d(x, w, b, 1, 1), [x, w, b]),
        "conv2d_stride2": (lambda x, w, b: F.conv2d(x, w, b, 2, 1), [x, w, b]),
        "conv2d_transposed": (lambda x, w: F.conv_transpose2d(x, w, None, 2, 0), [x[:, :, :3, :3], wt]),
        "leaky_relu": (lambda a: F.leaky_relu(a, 0.2), [kinked]),
        "sigmoid": (F.sigmoid, [kinked]),
        "add": (ops.add, [pos, kinked]),
        "mul": (ops.mul, [pos, kinked]),
        "matmul": (ops.matmul, [a2, b2]),
        "instance_norm": (lambda x, g, b: F.instance_norm(x, g, b), [x[:, :, :4, :4], gam, bet]),
        "batch_norm_train": (
            lambda x, g, b: F.batch_norm(x, g, b, np.zeros(3), np.ones(3), True), [x[:, :, :4, :4], gam, bet]
        ),
        "batch_norm_eval": (
            lambda x, g, b: F.batch_norm(x, g, b, np.full(3, 0.2), np.full(3, 1.5), False), [x[:, :, :4, :4], gam, bet]
        ),
        "dropout_train": (
            lambda a: F.dropout(a, 0.3, True, np.random.default_rng(seed + 1000)), [kinked],
        ),
        "dropout_eval": (lambda a: F.dropout(a, 0.3, False, None), [kinked]),
        "zero_pad": (lambda a: F.zero_pad(a, 1, 0, 2, 1), [x[:, :, :3, :3]]),
        "center_crop": (lambda a: F.center_crop(a, 3, 2), [x]),
        "global_avg_pool_spatial": (F.global_avg_pool_spatial, [x]),
        "global_avg_pool_channel": (F.global_avg_pool_channel, [x]),
        "l2_norm": (lambda a: ops.l2_norm(a, axis=1), [kinked]),
        "mean": (lambda a: ops.mean(a, axis=0), [kinked]),
        "abs": (ops.abs, [kinked]),
        "exp": (ops.exp, [kinked]),
        "concat": (lambda a, c: ops.concat([a, c], axis=1), [x[:, :2], x[:, 1:]]),
    }


def gp_expression(seed: int) -> tuple[Callable, np.ndarray]:
    """Composite critic-like map whose gradient norm is differentiated in the penalty."""
    rng = np.random.default_rng(seed)
    w1 = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.4, dtype=np.float64)
    w2 = Tensor(rng.standard_normal((1, 3, 2, 2)) * 0.4, dtype=np.float64)
    gam = Tensor(rng.uniform(0.5, 1.5, 3), dtype=np.float64)
    bet = Tensor(rng.standard_normal(3), dtype=np.float64)

    def fn(t):
        h = F.leaky_relu(F.instance_norm(F.conv2d(t, w1, None, 2, 1), gam, bet), 0.2)
        return F.conv2d(h, w2, None, 1, 0)

    return fn, rng.standard_normal((1, 2, 6, 6))


def conv_adjoint_gap(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 7, 7)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    y = F.conv2d(Tensor(x), Tensor(w), None, 2, 1)
    v = rng.standard_normal(y.shape).astype(np.float32)
    back = F.conv_transpose2d(Tensor(v), Tensor(w), None, 2, 1).data
    return abs(float(np.sum(y.data * v)) - float(np.sum(x * back)))


def architecture_report() -> list[tuple[str, tuple, tuple]]:
    """(block, realized shape HxWxC, table shape) for the published configuration."""
    from .config import CriticConfig, GeneratorConfig
    from .critic import Critic
    from .generator import (
        PUBLISHED_DECODER_SHAPES, PUBLISHED_DOWNSAMPLE_SHAPES, PUBLISHED_ENCODER_SHAPES, PUBLISHED_HEAD_SHAPE, Generator,
    )

    cfg = GeneratorConfig()
    gen = Generator(cfg)
    trace: list = []
    n = 1
    gen(np.zeros((n, cfg.cond_channels, cfg.grid_h, cfg.grid_w), np.float32), np.array([1]),
        np.zeros((n, cfg.noise_dim), np.float32), np.random.default_rng(0), train=False, trace=trace)
    hwc = lambda s: (s[2], s[3], s[1])
    rows = []
    enc = [hwc(s) for k, s in trace if k == "encoder"]
    down = [hwc(s) for k, s in trace if k == "downsample"]
    dec = [hwc(s) for k, s in trace if k == "decoder"]
    head = [hwc(s) for k, s in trace if k == "head"]
    for i, (r, t) in enumerate(zip(enc, PUBLISHED_ENCODER_SHAPES)):
        rows.append((f"encoder{i + 1}", r, t))
    for i, (r, t) in enumerate(zip(down, PUBLISHED_DOWNSAMPLE_SHAPES)):
        rows.append((f"downsample{i + 1}", r, t))
    for i, (r, t) in enumerate(zip(dec, PUBLISHED_DECODER_SHAPES)):
        rows.append((f"decoder{i + 1}", r, t))
    rows.append(("head", head[0], PUBLISHED_HEAD_SHAPE))
    critic = Critic(CriticConfig(), cfg)
    rows.append(("critic_base", critic.shapes["base2"], (5, 6, 128)))
    rows.append(("critic_patch", critic.shapes["patch1"], (4, 5, 1)))
    counts = (len(enc), len(down), len(dec))
    if counts != (5, 5, 5):
        rows.append(("stage_count", counts, (5, 5, 5)))
    return rows


def run_selftest(seed: int = 0) -> tuple[bool, list[str]]:
    ok = True
    lines = []
    for name, (fn, inputs) in primitive_cases(seed).items():
        err = gradcheck(fn, inputs, seed=seed)
        good = err < GRAD_TOL
        ok &= good
        lines.append(f"{'PASS' if good else 'FAIL'} gradcheck {name}: rel err {err:.2e}")
    fn, x = gp_expression(seed)
    err = double_backward_check(fn, x)
    ok &= err < DOUBLE_TOL
    lines.append(f"{'PASS' if err < DOUBLE_TOL else 'FAIL'} double backward of gradient norm: rel err {err:.2e}")
    gap = conv_adjoint_gap(seed)
    ok &= gap < 1e-3
    lines.append(f"{'PASS' if gap < 1e-3 else 'FAIL'} conv adjoint identity: |gap| {gap:.2e}")
    for block, real, table in architecture_report():
        good = tuple(real) == tuple(table)
        ok &= good
        lines.append(f"{'PASS' if good else 'FAIL'} shape {block}: {real} (table {table})")
    return bool(ok), lines
