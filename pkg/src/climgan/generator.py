"""UNet generator with residual scSE blocks, noise injection and stochastic depth.

Layout for the published configuration (48x48 padded input)::

    encoder   48 -> 24 -> 12 -> 6 -> 3 -> 1   (resblock, then 2x2/2 downsample)
    center    two 1x1 convs at 1x1x256
    decoder   1 -> 2(+pad 3) -> 6 -> 12 -> 24 -> 48, each stage fed the
              encoder skip of the same extent
    head      1x1 conv to one channel, center crop to the grid

Each decoder stage carries two transposed convolutions from the lower
resolution: an upscaling path that acts as the shortcut, and the first layer
of the residual main branch.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import Tensor, ops
from .autodiff import functional as F
from .config import ConfigError, GeneratorConfig
from .nn import BatchNorm2d, Conv2d, ConvTranspose2d, Embedding, Linear, Module, param

PUBLISHED_ENCODER_SHAPES = [(48, 48, 64), (24, 24, 128), (12, 12, 256), (6, 6, 256), (3, 3, 256)]
PUBLISHED_DOWNSAMPLE_SHAPES = [(24, 24, 64), (12, 12, 128), (6, 6, 256), (3, 3, 256), (1, 1, 256)]
PUBLISHED_DECODER_SHAPES = [(3, 3, 256), (6, 6, 256), (12, 12, 256), (24, 24, 128), (48, 48, 64)]
PUBLISHED_HEAD_SHAPE = (37, 44, 1)


class RandomSource:
    """Randomness for one forward pass.

    Either one generator for the whole batch (training) or one generator per
    sample, in which case every noise field of sample ``i`` comes from its
    own stream and results do not depend on how samples are batched.
    """

    def __init__(self, rng: np.random.Generator | Sequence[np.random.Generator]):
        if isinstance(rng, np.random.Generator):
            self.master, self.per_sample = rng, None
        else:
            self.per_sample = list(rng)
            self.master = None

    def field(self, n: int, h: int, w: int, dtype=np.float32) -> np.ndarray:
        if self.per_sample is None:
            return self.master.standard_normal((n, 1, h, w)).astype(dtype)
        if len(self.per_sample) != n:
            raise ValueError(f"{len(self.per_sample)} sample streams for batch of {n}")
        return np.stack([r.standard_normal((1, h, w)) for r in self.per_sample]).astype(dtype)

    def vector(self, n: int, dim: int) -> np.ndarray:
        if self.per_sample is None:
            return self.master.standard_normal((n, dim)).astype(np.float32)
        return np.stack([r.standard_normal(dim) for r in self.per_sample]).astype(np.float32)

    @property
    def rng(self) -> np.random.Generator:
        if self.master is None:
            raise RuntimeError("per-sample random source has no batch-level stream (eval mode only)")
        return self.master


def as_source(rng) -> RandomSource:
    return rng if isinstance(rng, RandomSource) else RandomSource(rng)


def survival_schedule(l: int, n: int) -> float:
    """Linear stochastic-depth survival probability: 1 at block 1, 0.5 at block n."""
    if n < 2:
        raise ConfigError("survival schedule needs at least 2 blocks")
    if not 1 <= l <= n:
        raise ValueError(f"block index {l} outside 1..{n}")
    return 1.0 - (l - 1) / (2.0 * (n - 1))


class NoiseInjection(Module):
    """Adds one H x W standard-normal field per sample, shared across channels."""

    def __init__(self, init: float):
        super().__init__()
        self.scale = param(np.full(1, init))

    def __call__(self, x: Tensor, rs: RandomSource) -> Tensor:
        n, _, h, w = x.shape
        noise = rs.field(n, h, w, x.dtype)
        return ops.add(x, ops.mul(noise, ops.reshape(self.scale, (1, 1, 1, 1))))


class ConvUnit(Module):
    """conv -> [dropout] -> batch norm -> LeakyReLU -> [noise]."""

    def __init__(self, rng, cin, cout, k, stride, padding, cfg: GeneratorConfig,
                 dropout: bool = False, noise: bool = True, transposed: bool = False):
        super().__init__()
        cls = ConvTranspose2d if transposed else Conv2d
        self.conv = cls(rng, cin, cout, k, stride, padding)
        self.bn = BatchNorm2d(cout)
        self.noise = NoiseInjection(cfg.noise_init) if noise else None
        self.dropout_rate = cfg.dropout_rate if dropout else 0.0
        self.slope = cfg.leaky_slope

    def __call__(self, x: Tensor, rs: RandomSource) -> Tensor:
        y = self.conv(x)
        if self.training and self.dropout_rate > 0:
            y = F.dropout(y, self.dropout_rate, True, rs.rng)
        y = F.leaky_relu(self.bn(y), self.slope)
        if self.noise is not None:
            y = self.noise(y, rs)
        return y


class SCSE(Module):
    """Concurrent spatial and channel squeeze-excitation, combined by elementwise max."""

    def __init__(self, rng, c: int, reduction: int):
        super().__init__()
        hidden = max(1, c // reduction)
        self.fc1 = Linear(rng, c, hidden)
        self.fc2 = Linear(rng, hidden, c)
        self.spatial = Conv2d(rng, c, 1, 1)

    def __call__(self, x: Tensor) -> Tensor:
        n, c = x.shape[:2]
        squeezed = ops.reshape(F.global_avg_pool_spatial(x), (n, c))
        hidden = F.leaky_relu(self.fc1(squeezed), 0.0)
        channel_gate = ops.reshape(F.sigmoid(self.fc2(hidden)), (n, c, 1, 1))
        spatial_gate = F.sigmoid(self.spatial(x))
        return ops.maximum(ops.mul(x, channel_gate), ops.mul(x, spatial_gate))


class EncoderBlock(Module):
    def __init__(self, rng, cin: int, cout: int, survival: float, dropout: bool, cfg: GeneratorConfig):
        super().__init__()
        self.survival = survival
        self.has_dropout = dropout
        self.proj = Conv2d(rng, cin, cout, 1, bias=False)
        self.conv1 = ConvUnit(rng, cin, cout, 3, 1, 1, cfg, dropout)
        self.conv2 = ConvUnit(rng, cout, cout, 3, 1, 1, cfg, dropout)
        self.scse = SCSE(rng, cout, cfg.scse_reduction)

    def __call__(self, x: Tensor, rs: RandomSource) -> Tensor:
        shortcut = self.proj(x)
        if self.training and rs.rng.random() >= self.survival:
            return shortcut
        return ops.add(shortcut, self.scse(self.conv2(self.conv1(x, rs), rs)))


class DecoderBlock(Module):
    def __init__(self, rng, cin: int, cskip: int, cout: int, survival: float, dropout: bool, cfg: GeneratorConfig):
        super().__init__()
        self.survival = survival
        self.has_dropout = dropout
        self.upscale = ConvTranspose2d(rng, cin, cout, 2, 2, 0)
        self.tconv = ConvUnit(rng, cin, cout, 2, 2, 0, cfg, dropout, transposed=True)
        self.proj = Conv2d(rng, cout + cskip, cout, 1, bias=False)
        self.conv1 = ConvUnit(rng, cout + cskip, cout, 3, 1, 1, cfg, dropout)
        self.conv2 = ConvUnit(rng, cout, cout, 3, 1, 1, cfg, dropout)
        self.scse = SCSE(rng, cout, cfg.scse_reduction)

    def __call__(self, x: Tensor, skip: Tensor, rs: RandomSource, trace: list | None = None) -> Tensor:
        h, w = skip.shape[2:]
        up = self.upscale(x)
        if trace is not None:
            trace.append(("upscale", up.shape))
        up = F.pad_to(up, h, w)
        shortcut = self.proj(ops.concat([up, skip], axis=1))
        if self.training and rs.rng.random() >= self.survival:
            return shortcut
        main = F.pad_to(self.tconv(x, rs), h, w)
        main = self.scse(self.conv2(self.conv1(ops.concat([main, skip], axis=1), rs), rs))
        return ops.add(shortcut, main)


def _down(n: int) -> int:
    return (n - 2) // 2 + 1


def stage_extents(padded: int, n_stages: int) -> list[int]:
    """Spatial extent at each encoder stage, followed by the bottleneck extent."""
    ext = [padded]
    for _ in range(n_stages):
        if ext[-1] < 2:
            raise ConfigError(f"padded extent {padded} cannot be downsampled {n_stages} times")
        ext.append(_down(ext[-1]))
    return ext


class Generator(Module):
    def __init__(self, cfg: GeneratorConfig, rng: np.random.Generator | None = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(cfg.init_seed)
        self.extents = stage_extents(cfg.padded, cfg.n_stages)
        for k in range(cfg.n_stages):
            up, skip = 2 * self.extents[k + 1], self.extents[k]
            if not 0 <= skip - up <= 1:
                raise ConfigError(
                    f"decoder stage upsampling {self.extents[k + 1]}->{up} cannot be padded to skip extent {skip}"
                )
        n = cfg.n_stages
        ch = list(cfg.stage_channels)
        self.embedding = Embedding(rng, cfg.n_months, cfg.embed_dim)
        self.encoders, self.downs = [], []
        cin = cfg.context_channels
        for i in range(n):
            dropout = i >= n - cfg.dropout_blocks
            self.encoders.append(EncoderBlock(rng, cin, ch[i], survival_schedule(i + 1, n), dropout, cfg))
            self.downs.append(ConvUnit(rng, ch[i], ch[i], 2, 2, 0, cfg, noise=False))
            cin = ch[i]
        self.center1 = Conv2d(rng, ch[-1], ch[-1], 1)
        self.center_bn1 = BatchNorm2d(ch[-1])
        self.center2 = Conv2d(rng, ch[-1], ch[-1], 1)
        self.center_bn2 = BatchNorm2d(ch[-1])
        self.decoders = []
        cin = ch[-1]
        for k in range(n):
            enc = n - 1 - k
            dropout = k < cfg.dropout_blocks
            self.decoders.append(
                DecoderBlock(rng, cin, ch[enc], ch[enc], survival_schedule(n - k, n), dropout, cfg)
            )
            cin = ch[enc]
        self.head = Conv2d(rng, ch[0], 1, 1)

    # -- inputs ---------------------------------------------------------------
    def build_context(self, cond, months: np.ndarray, z) -> Tensor:
        """Assemble the padded input: covariate/lag maps, month embedding maps, noise maps."""
        cfg = self.cfg
        cond = cond if isinstance(cond, Tensor) else Tensor(np.asarray(cond, dtype=np.float32))
        n = cond.shape[0]
        if cond.shape[1:] != (cfg.cond_channels, cfg.grid_h, cfg.grid_w):
            raise ValueError(
                f"conditioning maps {cond.shape[1:]} != {(cfg.cond_channels, cfg.grid_h, cfg.grid_w)}"
            )
        p = cfg.padded
        months = np.asarray(months, dtype=np.int64)
        if months.min() < 1 or months.max() > cfg.n_months:
            raise ValueError("month indices must lie in 1..n_months")
        emb = ops.reshape(self.embedding(months - 1), (n, cfg.embed_dim, 1, 1))
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float32))
        parts = [
            F.pad_to(cond, p, p),
            ops.broadcast_to(emb, (n, cfg.embed_dim, p, p)),
            ops.broadcast_to(ops.reshape(z, (n, cfg.noise_dim, 1, 1)), (n, cfg.noise_dim, p, p)),
        ]
        return ops.concat(parts, axis=1)

    # -- forward ---------------------------------------------------------------
    def forward_context(self, ctx: Tensor, rs, train: bool = False, trace: list | None = None) -> Tensor:
        self.train(train)
        rs = as_source(rs)
        cfg = self.cfg
        if ctx.shape[1:] != (cfg.context_channels, cfg.padded, cfg.padded):
            raise ValueError(f"context shape {ctx.shape[1:]} does not match configuration")
        x, skips = ctx, []
        for enc, down in zip(self.encoders, self.downs):
            x = enc(x, rs)
            skips.append(x)
            if trace is not None:
                trace.append(("encoder", x.shape))
            x = down(x, rs)
            if trace is not None:
                trace.append(("downsample", x.shape))
        x = F.leaky_relu(self.center_bn1(self.center1(x)), cfg.leaky_slope)
        x = self.center_bn2(self.center2(x))
        if trace is not None:
            trace.append(("center", x.shape))
        for dec, skip in zip(self.decoders, reversed(skips)):
            x = dec(x, skip, rs, trace)
            if trace is not None:
                trace.append(("decoder", x.shape))
        x = self.head(x)
        if trace is not None:
            trace.append(("head_conv", x.shape))
        x = F.center_crop(x, cfg.grid_h, cfg.grid_w)
        if trace is not None:
            trace.append(("head", x.shape))
        return x

    def __call__(self, cond, months, z, rs, train: bool = False, trace: list | None = None) -> Tensor:
        return self.forward_context(self.build_context(cond, months, z), rs, train, trace)

    def noise_scales(self) -> list[Tensor]:
        return [m.scale for m in self.modules() if isinstance(m, NoiseInjection)]
