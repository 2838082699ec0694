"""Small module system: parameter registration, layers, and state dicts."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import Tensor
from .autodiff import functional as F
from .autodiff import ops


class Module:
    """Base class; parameters are :class:`Tensor` attributes with ``requires_grad``.

    Non-trainable state (running statistics, power-iteration vectors) lives
    in ``self.buffers`` as plain numpy arrays.
    """

    def __init__(self) -> None:
        self.training = True
        self.buffers: dict[str, np.ndarray] = {}

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name in ("buffers", "training"):
                continue
            yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, arr in self.buffers.items():
            yield prefix + name, arr
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({f"{name}#buf": arr for name, arr in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | {f"{n}#buf" for n in buffers}
        missing = expected - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)[:5]}")
        for name, p in params.items():
            arr = state[name]
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = np.array(arr, dtype=p.dtype)
        for name, buf in buffers.items():
            arr = state[f"{name}#buf"]
            buf[...] = arr

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def param(data: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True, name=name)


def glorot(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


class Conv2d(Module):
    def __init__(self, rng, cin: int, cout: int, k: int, stride: int = 1, padding: int = 0, bias: bool = True):
        super().__init__()
        self.k, self.stride, self.padding = k, stride, padding
        self.cin, self.cout = cin, cout
        self.weight = param(glorot(rng, (cout, cin, k, k), cin * k * k, cout * k * k))
        self.bias = param(np.zeros(cout)) if bias else None

    def out_extent(self, h: int, w: int) -> tuple[int, int]:
        e = lambda n: (n + 2 * self.padding - self.k) // self.stride + 1
        return e(h), e(w)

    def effective_weight(self) -> Tensor:
        return self.weight

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.effective_weight(), self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, rng, cin: int, cout: int, k: int, stride: int = 1, padding: int = 0, bias: bool = True):
        super().__init__()
        self.k, self.stride, self.padding = k, stride, padding
        self.weight = param(glorot(rng, (cin, cout, k, k), cin * k * k, cout * k * k))
        self.bias = param(np.zeros(cout)) if bias else None

    def out_extent(self, h: int, w: int) -> tuple[int, int]:
        e = lambda n: (n - 1) * self.stride - 2 * self.padding + self.k
        return e(h), e(w)

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, rng, nin: int, nout: int, bias: bool = True):
        super().__init__()
        self.weight = param(glorot(rng, (nin, nout), nin, nout))
        self.bias = param(np.zeros(nout)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = param(np.ones(c))
        self.beta = param(np.zeros(c))
        self.buffers["running_mean"] = np.zeros(c, dtype=np.float32)
        self.buffers["running_var"] = np.ones(c, dtype=np.float32)

    def __call__(self, x: Tensor) -> Tensor:
        return F.batch_norm(
            x, self.gamma, self.beta, self.buffers["running_mean"], self.buffers["running_var"],
            self.training, self.momentum, self.eps,
        )


class InstanceNorm2d(Module):
    def __init__(self, c: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = param(np.ones(c))
        self.beta = param(np.zeros(c))

    def __call__(self, x: Tensor) -> Tensor:
        return F.instance_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, rng, n: int, dim: int):
        super().__init__()
        self.table = param(glorot(rng, (n, dim), n, dim))

    def __call__(self, idx: np.ndarray) -> Tensor:
        return ops.take_rows(self.table, idx)
