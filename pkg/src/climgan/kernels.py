"""Hot convolution kernels with a compiled backend and a numpy fallback.

The compiled extension (``climgan._kernels``) is used when it was built and
``CLIMGAN_PURE_PYTHON`` is not set.  Both backends produce bit-identical
results: every output element is either a copy or a sum accumulated in the
same (c, i, j) order.
"""
from __future__ import annotations

import os

import numpy as np

__all__ = ["BACKEND", "im2col", "col2im", "im2col_numpy", "col2im_numpy", "out_extent"]


def out_extent(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def im2col_numpy(x: np.ndarray, k: int, s: int, p: int) -> np.ndarray:
    n, c, h, w = x.shape
    oh, ow = out_extent(h, k, s, p), out_extent(w, k, s, p)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = np.empty((c, k, k, n, oh, ow), dtype=x.dtype)
    for i in range(k):
        hi = i + s * (oh - 1) + 1
        for j in range(k):
            wj = j + s * (ow - 1) + 1
            cols[:, i, j] = xp[:, :, i:hi:s, j:wj:s].transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * oh * ow)


def col2im_numpy(cols: np.ndarray, n: int, c: int, h: int, w: int, k: int, s: int, p: int) -> np.ndarray:
    oh, ow = out_extent(h, k, s, p), out_extent(w, k, s, p)
    cols6 = cols.reshape(c, k, k, n, oh, ow)
    xp = np.zeros((n, c, h + 2 * p + s, w + 2 * p + s), dtype=cols.dtype)
    for i in range(k):
        hi = i + s * (oh - 1) + 1
        for j in range(k):
            wj = j + s * (ow - 1) + 1
            xp[:, :, i:hi:s, j:wj:s] += cols6[:, i, j].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(xp[:, :, p:p + h, p:p + w])


try:
    if os.environ.get("CLIMGAN_PURE_PYTHON"):
        raise ImportError("pure-python backend forced")
    from climgan import _kernels as _ext
except ImportError:
    _ext = None

BACKEND = "cython" if _ext is not None else "numpy"


def im2col(x: np.ndarray, k: int, s: int, p: int) -> np.ndarray:
    if _ext is not None and x.dtype in (np.float32, np.float64):
        return _ext.im2col(np.ascontiguousarray(x), k, s, p)
    return im2col_numpy(x, k, s, p)


def col2im(cols: np.ndarray, n: int, c: int, h: int, w: int, k: int, s: int, p: int) -> np.ndarray:
    if _ext is not None and cols.dtype in (np.float32, np.float64):
        return _ext.col2im(np.ascontiguousarray(cols), n, c, h, w, k, s, p)
    return col2im_numpy(cols, n, c, h, w, k, s, p)
