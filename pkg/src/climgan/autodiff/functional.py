"""Neural-network building blocks composed from the primitives in ``ops``.

Shape conventions are NCHW throughout.  Everything here is a composition of
primitives, so it inherits first- and second-order differentiability.
"""
from __future__ import annotations

import numpy as np

from .. import kernels
from . import ops
from .tensor import Tensor, as_tensor

__all__ = [
    "conv2d", "conv_transpose2d", "linear", "leaky_relu", "sigmoid",
    "instance_norm", "batch_norm", "dropout", "zero_pad", "pad_to",
    "center_crop", "global_avg_pool_spatial", "global_avg_pool_channel",
    "l2_norm", "concat", "ShapeError",
]


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``x`` is [N,C,H,W], ``weight`` is [F,C,k,k]."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    f, cw, k, k2 = weight.shape
    if cw != c or k != k2:
        raise ShapeError(f"conv2d weight {weight.shape} does not match input channels {c}")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(f"conv2d kernel {k} larger than padded input {h}x{w} (padding {padding})")
    oh = kernels.out_extent(h, k, stride, padding)
    ow = kernels.out_extent(w, k, stride, padding)
    cols = ops.im2col(x, k, stride, padding)
    out = ops.matmul(ops.reshape(weight, (f, c * k * k)), cols)
    out = ops.transpose(ops.reshape(out, (f, n, oh, ow)), (1, 0, 2, 3))
    if bias is not None:
        out = ops.add(out, ops.reshape(bias, (1, f, 1, 1)))
    return out


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`. ``x`` is [N,C,H,W], ``weight`` is [C,F,k,k]."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    cw, f, k, k2 = weight.shape
    if cw != c or k != k2:
        raise ShapeError(f"conv_transpose2d weight {weight.shape} does not match input channels {c}")
    oh = (h - 1) * stride - 2 * padding + k
    ow = (w - 1) * stride - 2 * padding + k
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv_transpose2d produces empty output from {x.shape}")
    xf = ops.reshape(ops.transpose(x, (1, 0, 2, 3)), (c, n * h * w))
    wf = ops.transpose(ops.reshape(weight, (c, f * k * k)), (1, 0))
    out = ops.col2im(ops.matmul(wf, xf), (n, f, oh, ow), k, stride, padding)
    if bias is not None:
        out = ops.add(out, ops.reshape(bias, (1, f, 1, 1)))
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x`` [N,in] times ``weight`` [in,out]."""
    out = ops.matmul(x, weight)
    if bias is not None:
        out = ops.add(out, bias)
    return out


leaky_relu = ops.leaky_relu
sigmoid = ops.sigmoid
l2_norm = ops.l2_norm
concat = ops.concat


def instance_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize each sample's each channel over its spatial extent."""
    if x.ndim != 4:
        raise ShapeError(f"instance_norm expects [N,C,H,W], got {x.shape}")
    mu = ops.mean(x, (2, 3), keepdims=True)
    xc = ops.sub(x, mu)
    var = ops.mean(ops.mul(xc, xc), (2, 3), keepdims=True)
    out = ops.div(xc, ops.sqrt(ops.add(var, eps)))
    c = x.shape[1]
    if gamma is not None:
        out = ops.mul(out, ops.reshape(gamma, (1, c, 1, 1)))
    if beta is not None:
        out = ops.add(out, ops.reshape(beta, (1, c, 1, 1)))
    return out


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over (N,H,W); updates running statistics in place when training."""
    c = x.shape[1]
    if train:
        mu = ops.mean(x, (0, 2, 3), keepdims=True)
        xc = ops.sub(x, mu)
        var = ops.mean(ops.mul(xc, xc), (0, 2, 3), keepdims=True)
        count = x.size // c
        unbiased = var.data.reshape(c) * (count / max(count - 1, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.data.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
        out = ops.div(xc, ops.sqrt(ops.add(var, eps)))
    else:
        scale = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype).reshape(1, c, 1, 1)
        shift = running_mean.astype(x.dtype).reshape(1, c, 1, 1)
        out = ops.mul(ops.sub(x, shift), scale)
    out = ops.mul(out, ops.reshape(gamma, (1, c, 1, 1)))
    return ops.add(out, ops.reshape(beta, (1, c, 1, 1)))


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: scaled at train time, identity at eval."""
    if not train or rate <= 0.0:
        return x
    if rate >= 1.0:
        return ops.mul(x, np.zeros_like(x.data))
    keep = rng.random(x.shape) >= rate
    return ops.mul(x, (keep / (1.0 - rate)).astype(x.dtype))


def zero_pad(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    if min(top, bottom, left, right) < 0:
        raise ShapeError("zero_pad widths must be non-negative")
    n, c, h, w = x.shape
    if top == bottom == left == right == 0:
        return x
    key = (slice(None), slice(None), slice(top, top + h), slice(left, left + w))
    return ops.index_put(x, key, (n, c, h + top + bottom, w + left + right))


def pad_to(x: Tensor, h: int, w: int) -> Tensor:
    """Zero-pad to (h, w), centered; odd remainders go to the bottom/right."""
    dh, dw = h - x.shape[2], w - x.shape[3]
    if dh < 0 or dw < 0:
        raise ShapeError(f"cannot pad {x.shape[2:]} to smaller extent {(h, w)}")
    return zero_pad(x, dh // 2, dh - dh // 2, dw // 2, dw - dw // 2)


def center_crop(x: Tensor, h: int, w: int) -> Tensor:
    """Inverse of :func:`pad_to`."""
    dh, dw = x.shape[2] - h, x.shape[3] - w
    if dh < 0 or dw < 0:
        raise ShapeError(f"cannot crop {x.shape[2:]} to larger extent {(h, w)}")
    if dh == 0 and dw == 0:
        return x
    top, left = dh // 2, dw // 2
    return ops.index(x, (slice(None), slice(None), slice(top, top + h), slice(left, left + w)))


def global_avg_pool_spatial(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C,1,1]."""
    return ops.mean(x, (2, 3), keepdims=True)


def global_avg_pool_channel(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,1,H,W]."""
    return ops.mean(x, 1, keepdims=True)


def mae(a: Tensor, b) -> Tensor:
    return ops.mean(ops.abs(ops.sub(a, as_tensor(b, a))))
