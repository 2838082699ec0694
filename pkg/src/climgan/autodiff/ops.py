"""Primitive differentiable operations.

Each primitive computes its forward value with numpy and registers a
vector-Jacobian product written in terms of other primitives, which is what
makes the reverse sweep differentiable a second time.  Non-smooth points
(leaky ReLU kink, abs at 0, max ties) use a constant 0/1 mask, so their
second derivative is zero almost everywhere.
"""
from __future__ import annotations

import builtins

import numpy as np

from .. import kernels
from .tensor import Tensor, as_tensor, record

__all__ = [
    "add", "sub", "neg", "mul", "div", "power", "exp", "log", "sqrt", "abs",
    "sigmoid", "leaky_relu", "maximum", "sum", "mean", "sum_to", "broadcast_to",
    "reshape", "transpose", "matmul", "index", "index_put", "concat",
    "im2col", "col2im", "take_rows", "scatter_rows", "l2_norm", "constant",
]


def constant(x, like: Tensor | None = None) -> Tensor:
    return as_tensor(x, like)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


# -- broadcasting -----------------------------------------------------------

def _reduce_axes(from_shape: tuple, to_shape: tuple) -> tuple[tuple, int]:
    lead = len(from_shape) - len(to_shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, d in enumerate(to_shape) if d == 1 and from_shape[lead + i] != 1
    )
    return axes, lead


def sum_to(x: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    axes, lead = _reduce_axes(x.shape, shape)
    data = x.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    data = data.reshape(shape)

    def vjp(g, needs):
        return (broadcast_to(g, x.shape),)

    return record(data, (x,), vjp)


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    data = np.ascontiguousarray(np.broadcast_to(x.data, shape))

    def vjp(g, needs):
        return (sum_to(g, x.shape),)

    return record(data, (x,), vjp)


# -- arithmetic -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def vjp(g, needs):
        return (sum_to(g, a.shape) if needs[0] else None,
                sum_to(g, b.shape) if needs[1] else None)

    return record(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def vjp(g, needs):
        return (sum_to(g, a.shape) if needs[0] else None,
                sum_to(neg(g), b.shape) if needs[1] else None)

    return record(a.data - b.data, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g, needs: (neg(g),))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def vjp(g, needs):
        return (sum_to(mul(g, b), a.shape) if needs[0] else None,
                sum_to(mul(g, a), b.shape) if needs[1] else None)

    return record(a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def vjp(g, needs):
        ga = sum_to(div(g, b), a.shape) if needs[0] else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape) if needs[1] else None
        return ga, gb

    return record(a.data / b.data, (a, b), vjp)


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    if p == 1.0:
        return a
    if p == 2.0:
        return mul(a, a)

    def vjp(g, needs):
        return (mul(g, mul(power(a, p - 1.0), p)),)

    return record(a.data ** a.dtype.type(p), (a,), vjp)


def exp(a: Tensor) -> Tensor:
    def vjp(g, needs):
        return (mul(g, out),)

    out = record(np.exp(a.data), (a,), vjp)
    return out


def log(a: Tensor) -> Tensor:
    return record(np.log(a.data), (a,), lambda g, needs: (div(g, a),))


def sqrt(a: Tensor) -> Tensor:
    def vjp(g, needs):
        return (div(mul(g, 0.5), out),)

    out = record(np.sqrt(a.data), (a,), vjp)
    return out


def abs(a: Tensor) -> Tensor:
    sign = Tensor(np.sign(a.data))
    return record(np.abs(a.data), (a,), lambda g, needs: (mul(g, sign),))


def sigmoid(a: Tensor) -> Tensor:
    def vjp(g, needs):
        return (mul(g, mul(out, sub(1.0, out))),)

    x = a.data
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)
    out = record(data, (a,), vjp)
    return out


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = Tensor(np.where(a.data > 0, 1.0, slope).astype(a.dtype))
    return record(a.data * mask.data, (a,), lambda g, needs: (mul(g, mask),))


def maximum(a, b) -> Tensor:
    a, b = _pair(a, b)
    take_a = a.data >= b.data
    ma = Tensor(take_a.astype(a.dtype))
    mb = Tensor((~take_a).astype(a.dtype))

    def vjp(g, needs):
        return (sum_to(mul(g, ma), a.shape) if needs[0] else None,
                sum_to(mul(g, mb), b.shape) if needs[1] else None)

    return record(np.maximum(a.data, b.data), (a, b), vjp)


# -- reductions & shape -----------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)
    kshape = tuple(1 if i in axes else d for i, d in enumerate(a.shape))

    def vjp(g, needs):
        return (broadcast_to(reshape(g, kshape), a.shape),)

    return record(np.asarray(data, dtype=a.dtype), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum(a, axes, keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)
    if data.shape == a.shape:
        return a
    return record(data, (a,), lambda g, needs: (reshape(g, a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.ascontiguousarray(a.data.transpose(axes))
    return record(data, (a,), lambda g, needs: (transpose(g, inv),))


def _swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(t, axes)


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def vjp(g, needs):
        ga = sum_to(matmul(g, _swap_last(b)), a.shape) if needs[0] else None
        gb = sum_to(matmul(_swap_last(a), g), b.shape) if needs[1] else None
        return ga, gb

    return record(np.matmul(a.data, b.data), (a, b), vjp)


def index(a: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing; the adjoint scatters into zeros."""
    data = np.ascontiguousarray(a.data[key])
    return record(data, (a,), lambda g, needs: (index_put(g, key, a.shape),))


def index_put(g: Tensor, key, shape: tuple) -> Tensor:
    """Zero tensor of ``shape`` with ``g`` written at ``key``; adjoint of :func:`index`."""
    data = np.zeros(shape, dtype=g.dtype)
    data[key] = g.data
    return record(data, (g,), lambda gg, needs: (index(gg, key),))


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if len(tensors) == 1:
        return tensors[0]
    nd = tensors[0].ndim
    axis = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != axis):
            raise ValueError(f"concat shape mismatch along axis {axis}: {[x.shape for x in tensors]}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g, needs):
        out = []
        for i, need in enumerate(needs):
            if not need:
                out.append(None)
                continue
            key = [builtins.slice(None)] * nd
            key[axis] = builtins.slice(int(bounds[i]), int(bounds[i + 1]))
            out.append(index(g, tuple(key)))
        return tuple(out)

    return record(data, tuple(tensors), vjp)


# -- convolution lowering -----------------------------------------------------

def im2col(x: Tensor, k: int, s: int, p: int) -> Tensor:
    n, c, h, w = x.shape

    def vjp(g, needs):
        return (col2im(g, (n, c, h, w), k, s, p),)

    return record(kernels.im2col(x.data, k, s, p), (x,), vjp)


def col2im(cols: Tensor, shape: tuple, k: int, s: int, p: int) -> Tensor:
    n, c, h, w = shape

    def vjp(g, needs):
        return (im2col(g, k, s, p),)

    return record(kernels.col2im(cols.data, n, c, h, w, k, s, p), (cols,), vjp)


# -- gathers ------------------------------------------------------------------

def take_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    n = table.shape[0]
    return record(table.data[idx], (table,), lambda g, needs: (scatter_rows(g, idx, n),))


def scatter_rows(g: Tensor, idx: np.ndarray, n: int) -> Tensor:
    data = np.zeros((n,) + g.shape[1:], dtype=g.dtype)
    np.add.at(data, idx, g.data)
    return record(data, (g,), lambda gg, needs: (take_rows(gg, idx),))


# -- norms --------------------------------------------------------------------

def l2_norm(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Euclidean norm; the gradient at a zero vector is defined as zero."""
    axes = _norm_axis(axis, a.ndim)
    data = np.sqrt((a.data * a.data).sum(axis=axes, keepdims=keepdims))
    kshape = tuple(1 if i in axes else d for i, d in enumerate(a.shape))

    def vjp(g, needs):
        zero = Tensor((out.data == 0).astype(a.dtype).reshape(kshape))
        safe = add(reshape(out, kshape), zero)
        return (mul(broadcast_to(reshape(g, kshape), a.shape), div(a, safe)),)

    out = record(np.asarray(data, dtype=a.dtype), (a,), vjp)
    return out
