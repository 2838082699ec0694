"""Time im2col/col2im for the compiled and numpy backends.

    python benchmarks/bench_kernels.py [--repeat 20]

Both backends are imported directly, so the comparison runs in one process
regardless of CLIMGAN_PURE_PYTHON.  Shapes follow the layers that dominate
desk-scale and published-config training.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from climgan import kernels

try:
    from climgan import _kernels as ext
except ImportError:  # extension not built
    ext = None

# (label, N, C, H, W, k, stride, padding)
CASES = [
    ("desk enc1 3x3", 16, 60, 16, 16, 3, 1, 1),
    ("desk down 2x2/2", 16, 8, 16, 16, 2, 2, 0),
    ("critic base 3x3/2", 16, 10, 16, 16, 3, 2, 1),
    ("published enc1 3x3", 4, 64, 48, 48, 3, 1, 1),
    ("published enc3 3x3", 4, 256, 12, 12, 3, 1, 1),
]


def best_of(fn, repeat: int) -> float:
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'case':<20}{'op':<8}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for label, n, c, h, w, k, s, p in CASES:
        x = rng.standard_normal((n, c, h, w)).astype(np.float32)
        cols = kernels.im2col_numpy(x, k, s, p)
        runs = {
            "im2col": (lambda: kernels.im2col_numpy(x, k, s, p),
                       (lambda: ext.im2col(x, k, s, p)) if ext else None),
            "col2im": (lambda: kernels.col2im_numpy(cols, n, c, h, w, k, s, p),
                       (lambda: ext.col2im(cols, n, c, h, w, k, s, p)) if ext else None),
        }
        if ext is not None:
            assert np.array_equal(ext.im2col(x, k, s, p), cols)
            assert np.array_equal(ext.col2im(cols, n, c, h, w, k, s, p),
                                  kernels.col2im_numpy(cols, n, c, h, w, k, s, p))
        for op, (py, cy) in runs.items():
            t_py = best_of(py, args.repeat) * 1e3
            if cy is None:
                print(f"{label:<20}{op:<8}{t_py:>10.3f}{'n/a':>11}{'':>9}")
                continue
            t_cy = best_of(cy, args.repeat) * 1e3
            print(f"{label:<20}{op:<8}{t_py:>10.3f}{t_cy:>11.3f}{t_py / t_cy:>8.2f}x")


if __name__ == "__main__":
    main()
