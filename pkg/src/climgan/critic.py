"""Frame + patch critic on a shared base, with spectrally normalized convolutions.

    i_base = base(concat(map, cond))
    D(map | cond) = frame(i_base) + mean(patch(i_base))

The frame head's last convolution (k2, s2, p1) realizes a 2x2 grid on the
5x6 base features of the published grid; that grid is averaged to the
single frame score.
"""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor, ops
from .autodiff import functional as F
from .config import ConfigError, CriticConfig, GeneratorConfig
from .nn import Conv2d, InstanceNorm2d, Module

SIGMA_FLOOR = 1e-12


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def power_iteration(w: np.ndarray, u: np.ndarray, n_iter: int = 1) -> tuple[np.ndarray, np.ndarray, float]:
    """Power iteration on a 2-D matrix; returns updated (u, v) and the estimate u^T W v."""
    w = np.asarray(w, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    v = _unit(w.T @ u)
    for _ in range(n_iter):
        v = _unit(w.T @ u)
        u = _unit(w @ v)
    return u, v, float(u @ w @ v)


def spectral_normalize(weight: np.ndarray, u: np.ndarray, n_iter: int = 1) -> tuple[np.ndarray, np.ndarray, float]:
    """Plain-array spectral normalization: (weight / sigma, new u, sigma)."""
    w2 = np.asarray(weight).reshape(weight.shape[0], -1)
    u, _, sigma = power_iteration(w2, u, n_iter)
    return np.asarray(weight) / max(sigma, SIGMA_FLOOR), u, sigma


class SNConv2d(Conv2d):
    """Conv2d whose weight is divided by a power-iteration estimate of its top singular value.

    ``u``/``v`` are buffers advanced only by :meth:`power_iterate`; the
    forward pass treats them as constants so sigma stays differentiable in W.
    """

    def __init__(self, rng, cin, cout, k, stride=1, padding=0, bias=True, warmup: int = 100):
        super().__init__(rng, cin, cout, k, stride, padding, bias)
        u = _unit(rng.standard_normal(cout))
        self.buffers["u"] = u.astype(np.float32)
        self.buffers["v"] = np.zeros(cin * k * k, dtype=np.float32)
        self.power_iterate(warmup)

    def matrix(self) -> np.ndarray:
        return self.weight.data.reshape(self.weight.shape[0], -1)

    def power_iterate(self, n_iter: int = 1) -> float:
        u, v, sigma = power_iteration(self.matrix(), self.buffers["u"], n_iter)
        self.buffers["u"][...] = u
        self.buffers["v"][...] = v
        return sigma

    def sigma(self) -> Tensor:
        outer = np.outer(self.buffers["u"], self.buffers["v"]).astype(self.weight.dtype)
        w2 = ops.reshape(self.weight, (self.weight.shape[0], int(np.prod(self.weight.shape[1:]))))
        return ops.maximum(ops.sum(ops.mul(w2, outer)), np.asarray(SIGMA_FLOOR, dtype=self.weight.dtype))

    def effective_weight(self) -> Tensor:
        return ops.div(self.weight, self.sigma())


class ConvNormAct(Module):
    def __init__(self, rng, cin, cout, k, stride, padding, slope: float, norm_act: bool = True):
        super().__init__()
        self.conv = SNConv2d(rng, cin, cout, k, stride, padding)
        self.norm = InstanceNorm2d(cout) if norm_act else None
        self.slope = slope

    def __call__(self, x: Tensor) -> Tensor:
        y = self.conv(x)
        if self.norm is not None:
            y = F.leaky_relu(self.norm(y), self.slope)
        return y


def _extent(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


class Critic(Module):
    def __init__(self, cfg: CriticConfig, gen_cfg: GeneratorConfig, rng: np.random.Generator | None = None):
        super().__init__()
        cfg.validate()
        self.cfg, self.gen_cfg = cfg, gen_cfg
        rng = rng if rng is not None else np.random.default_rng(cfg.init_seed)
        slope = cfg.leaky_slope
        cin = 1 + gen_cfg.cond_channels
        self.base = []
        for f, s in zip(cfg.base_filters, cfg.base_strides):
            self.base.append(ConvNormAct(rng, cin, f, 3, s, 1, slope))
            cin = f
        hf = cfg.head_filters
        self.frame = [
            ConvNormAct(rng, cin, hf, 2, 1, 0, slope),
            ConvNormAct(rng, hf, hf, 2, 2, 0, slope),
            ConvNormAct(rng, hf, 1, 2, 2, 1, slope, norm_act=False),
        ]
        self.patch = [
            ConvNormAct(rng, cin, hf, 2, 1, 0, slope),
            ConvNormAct(rng, hf, 1, 1, 1, 0, slope, norm_act=False),
        ]
        self.shapes = self.layer_shapes()

    def layer_shapes(self) -> dict[str, tuple[int, int, int]]:
        """Walk the stride arithmetic; raise if any layer collapses to nothing."""
        h, w = self.gen_cfg.grid_h, self.gen_cfg.grid_w
        out: dict[str, tuple[int, int, int]] = {}

        def walk(layers, h, w, tag):
            for i, layer in enumerate(layers):
                c = layer.conv
                h, w = _extent(h, c.k, c.stride, c.padding), _extent(w, c.k, c.stride, c.padding)
                if h < 1 or w < 1:
                    raise ConfigError(f"critic {tag} layer {i} output collapses to {h}x{w}")
                if layer.norm is not None and h * w == 1:
                    raise ConfigError(f"critic {tag} layer {i}: instance norm over a 1x1 map")
                out[f"{tag}{i}"] = (h, w, c.cout)
            return h, w

        bh, bw = walk(self.base, h, w, "base")
        walk(self.frame, bh, bw, "frame")
        walk(self.patch, bh, bw, "patch")
        return out

    def sn_layers(self) -> list[SNConv2d]:
        return [m for m in self.modules() if isinstance(m, SNConv2d)]

    def power_iterate(self, n_iter: int | None = None) -> None:
        for layer in self.sn_layers():
            layer.power_iterate(self.cfg.sn_iterations if n_iter is None else n_iter)

    def features(self, x: Tensor, cond) -> Tensor:
        cond = cond if isinstance(cond, Tensor) else Tensor(np.asarray(cond, dtype=np.float32))
        if x.shape[0] != cond.shape[0] or x.shape[2:] != cond.shape[2:]:
            raise ValueError(f"map {x.shape} and conditioning {cond.shape} are not aligned")
        y = ops.concat([x, cond], axis=1)
        for layer in self.base:
            y = layer(y)
        return y

    def heads(self, base: Tensor) -> Tensor:
        n = base.shape[0]
        f = base
        for layer in self.frame:
            f = layer(f)
        p = base
        for layer in self.patch:
            p = layer(p)
        frame = ops.mean(ops.reshape(f, (n, int(np.prod(f.shape[1:])))), axis=1)
        patch = ops.mean(ops.reshape(p, (n, int(np.prod(p.shape[1:])))), axis=1)
        return ops.add(frame, patch)

    def forward_with_features(self, x: Tensor, cond) -> tuple[Tensor, Tensor]:
        base = self.features(x, cond)
        return self.heads(base), base

    def __call__(self, x: Tensor, cond) -> Tensor:
        return self.heads(self.features(x, cond))
