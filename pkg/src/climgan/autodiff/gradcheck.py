"""Finite-difference oracles for the reverse-mode engine.

All checks promote inputs to float64 and use central differences.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import Tape, Tensor, grad


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    num = float(np.linalg.norm((a - b).ravel()))
    den = max(float(np.linalg.norm(a.ravel())), float(np.linalg.norm(b.ravel())), 1e-12)
    return num / den


def _scalarize(fn: Callable, weights: np.ndarray | None):
    def wrapped(*args):
        out = fn(*args)
        if weights is None:
            return ops.sum(out)
        return ops.sum(ops.mul(out, weights))
    return wrapped


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    h: float = 1e-3,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The output is contracted against a fixed random weight tensor so every
    entry of the Jacobian contributes.
    """
    # own stream so weights never coincide with inputs drawn from the same seed
    rng = np.random.default_rng([seed, 0x5EED])
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    probe = [Tensor(a) for a in arrays]
    out_shape = fn(*probe).shape
    weights = rng.standard_normal(out_shape) if out_shape else None
    scalar = _scalarize(fn, weights)

    with Tape():
        ts = [Tensor(a, requires_grad=True) for a in arrays]
        y = scalar(*ts)
        analytic = [g.data for g in grad(y, ts)]

    worst = 0.0
    for i, a in enumerate(arrays):
        numeric = np.zeros_like(a)
        flat = a.reshape(-1)
        nflat = numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = scalar(*[Tensor(x) for x in arrays]).item()
            flat[j] = orig - h
            fm = scalar(*[Tensor(x) for x in arrays]).item()
            flat[j] = orig
            nflat[j] = (fp - fm) / (2 * h)
        worst = max(worst, _rel_err(analytic[i], numeric))
    return worst


def double_backward_check(
    fn: Callable[[Tensor], Tensor],
    x: np.ndarray,
    h: float = 1e-3,
) -> float:
    """Check d/dx ||grad_x fn(x)||_2 against finite differences of the first-order gradient."""
    x = np.array(x, dtype=np.float64)

    def grad_norm(arr: np.ndarray) -> float:
        with Tape():
            t = Tensor(arr, requires_grad=True)
            (g,) = grad(ops.sum(fn(t)), [t])
        return float(np.linalg.norm(g.data))

    with Tape():
        t = Tensor(x, requires_grad=True)
        (g,) = grad(ops.sum(fn(t)), [t], retain_graph=True)
        gn = ops.l2_norm(g)
        (gg,) = grad(gn, [t])
    analytic = gg.data

    numeric = np.zeros_like(x)
    flat, nflat = x.reshape(-1), numeric.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        fp = grad_norm(x)
        flat[j] = orig - h
        fm = grad_norm(x)
        flat[j] = orig
        nflat[j] = (fp - fm) / (2 * h)
    return _rel_err(analytic, numeric)
