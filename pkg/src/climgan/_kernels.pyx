# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im kernels.

Layout contract (shared with the numpy fallback in ``kernels.py``):
columns are ``[C*k*k, N*OH*OW]`` with row index ``(c*k + i)*k + j`` and
column index ``(n*OH + oh)*OW + ow``.
"""
import numpy as np
cimport numpy as cnp
from libc.string cimport memcpy

ctypedef fused real_t:
    float
    double


cdef inline Py_ssize_t _lo(Py_ssize_t off, int s):
    # first output index o with o*s + off >= 0
    if off >= 0:
        return 0
    return (-off + s - 1) // s


cdef inline Py_ssize_t _hi(Py_ssize_t off, int s, Py_ssize_t size, Py_ssize_t n_out):
    # one past the last output index o with o*s + off < size
    cdef Py_ssize_t last
    if size - 1 - off < 0:
        return 0
    last = (size - 1 - off) // s + 1
    return last if last < n_out else n_out


def im2col(real_t[:, :, :, ::1] x, int k, int s, int p):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t OH = (H + 2 * p - k) // s + 1
    cdef Py_ssize_t OW = (W + 2 * p - k) // s + 1
    dtype = np.float32 if real_t is float else np.float64
    out = np.empty((C * k * k, N * OH * OW), dtype=dtype)
    cdef real_t[:, ::1] cols = out
    cdef Py_ssize_t c, i, j, n, oh, ow, row, col, hh, oh0, oh1, ow0, ow1
    for c in range(C):
        for i in range(k):
            oh0 = _lo(i - p, s)
            oh1 = _hi(i - p, s, H, OH)
            for j in range(k):
                row = (c * k + i) * k + j
                ow0 = _lo(j - p, s)
                ow1 = _hi(j - p, s, W, OW)
                for n in range(N):
                    for oh in range(OH):
                        col = (n * OH + oh) * OW
                        if oh < oh0 or oh >= oh1:
                            for ow in range(OW):
                                cols[row, col + ow] = 0
                            continue
                        hh = oh * s + i - p
                        for ow in range(ow0):
                            cols[row, col + ow] = 0
                        if s == 1 and ow1 > ow0:
                            memcpy(&cols[row, col + ow0], &x[n, c, hh, ow0 + j - p], (ow1 - ow0) * sizeof(real_t))
                        else:
                            for ow in range(ow0, ow1):
                                cols[row, col + ow] = x[n, c, hh, ow * s + j - p]
                        for ow in range(ow1, OW):
                            cols[row, col + ow] = 0
    return out


def col2im(real_t[:, ::1] cols, int N, int C, int H, int W, int k, int s, int p):
    cdef Py_ssize_t OH = (H + 2 * p - k) // s + 1
    cdef Py_ssize_t OW = (W + 2 * p - k) // s + 1
    dtype = np.float32 if real_t is float else np.float64
    out = np.zeros((N, C, H, W), dtype=dtype)
    cdef real_t[:, :, :, ::1] x = out
    cdef Py_ssize_t c, i, j, n, oh, ow, row, col, hh, oh0, oh1, ow0, ow1
    for c in range(C):
        for i in range(k):
            oh0 = _lo(i - p, s)
            oh1 = _hi(i - p, s, H, OH)
            for j in range(k):
                row = (c * k + i) * k + j
                ow0 = _lo(j - p, s)
                ow1 = _hi(j - p, s, W, OW)
                for n in range(N):
                    for oh in range(oh0, oh1):
                        hh = oh * s + i - p
                        col = (n * OH + oh) * OW
                        for ow in range(ow0, ow1):
                            x[n, c, hh, ow * s + j - p] += cols[row, col + ow]
    return out
