"""Autoregressive scenario generation.

Step k of every trajectory builds its context from covariates of months
t-u..t (observed before T+1, scenario afterwards) and from index maps of
t-1..t-u, taking observed values up to T and the trajectory's own earlier
outputs after T.

Trajectory j draws all of its randomness from ``SeedSequence([seed, j])``.
Trajectories are processed in fixed-size chunks; the chunk partition does not
depend on the thread count, so serial and threaded runs agree bit-for-bit.
"""
from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_limits

from .autodiff import no_grad
from .data import DataError, GridStack, assemble_cond, load_grid_stack, save_grid_stack
from .generator import Generator, RandomSource

DEFAULT_CHUNK = 50


@dataclass
class TrajectoryEnsemble:
    scenario: str
    months: np.ndarray  # [h, 2]
    data: np.ndarray  # [M, h, H, W], physical units
    seeds: list[tuple[int, int]]  # (master seed, trajectory counter)
    clamp_rate: float = 0.0

    @property
    def n_traj(self) -> int:
        return self.data.shape[0]

    @property
    def horizon(self) -> int:
        return self.data.shape[1]


def trajectory_rng(seed: int, j: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, j]))


def _run_chunk(gen: Generator, js: list[int], seed: int, hist_cov: np.ndarray, hist_index: np.ndarray,
               future_cov: np.ndarray, months: np.ndarray, clamp: tuple[float, float] | None,
               trace: Callable | None) -> tuple[np.ndarray, int]:
    lag = gen.cfg.lag
    n = len(js)
    h_steps = future_cov.shape[1]
    rngs = [trajectory_rng(seed, j) for j in js]
    rs = RandomSource(rngs)
    cov_all = np.concatenate([hist_cov[:, -lag:], future_cov], axis=1)  # [C, u+h, H, W]
    gh, gw = hist_index.shape[1:]
    idx_all = np.empty((n, lag + h_steps, gh, gw), dtype=np.float32)
    idx_all[:, :lag] = hist_index[-lag:]
    clamped = 0
    for k in range(h_steps):
        t = lag + k
        window = cov_all[:, t - lag:t + 1][:, ::-1]
        cond = np.stack([assemble_cond(window, idx_all[i, t - lag:t][::-1]) for i in range(n)])
        if trace is not None:
            for i, j in enumerate(js):
                trace(j, k, cond[i])
        z = rs.vector(n, gen.cfg.noise_dim)
        with no_grad():
            out = gen(cond, np.full(n, months[k, 1]), z, rs, train=False).data[:, 0]
        if clamp is not None:
            lo, hi = clamp
            clamped += int(np.count_nonzero((out < lo) | (out > hi)))
            out = np.clip(out, lo, hi)
        idx_all[:, t] = out
    return idx_all[:, lag:], clamped


def project(gen: Generator, hist_cov: np.ndarray, hist_index: np.ndarray, future_cov: np.ndarray,
            months: np.ndarray, n_traj: int, seed: int, clamp: tuple[float, float] | None = None,
            index_stats: tuple[float, float] | None = None, scenario: str = "scenario",
            threads: int = 1, chunk: int = DEFAULT_CHUNK, trace: Callable | None = None,
            horizon: int | None = None) -> TrajectoryEnsemble:
    """Generate ``n_traj`` trajectories over ``horizon`` months (default: all scenario months).

    hist_cov [C, T0, H, W] and hist_index [T0, H, W] are normalized history
    ending at T; future_cov [C, h, H, W] holds the normalized scenario
    covariates for T+1.. and ``months`` their calendar (year, month).
    """
    cfg = gen.cfg
    lag = cfg.lag
    months = np.asarray(months).reshape(-1, 2)
    h_avail = future_cov.shape[1]
    horizon = h_avail if horizon is None else horizon
    if horizon < 1:
        raise DataError("horizon must be >= 1")
    if horizon > h_avail or len(months) < horizon:
        raise DataError(f"horizon {horizon} exceeds scenario covariate coverage of {min(h_avail, len(months))} months")
    if hist_index.shape[0] < lag or hist_cov.shape[1] < lag:
        raise DataError(f"history must cover at least {lag} months before the projection start")
    if future_cov.shape[0] != cfg.n_covariates or hist_cov.shape[0] != cfg.n_covariates:
        raise DataError(f"expected {cfg.n_covariates} covariates")
    if n_traj < 1:
        raise DataError("need at least one trajectory")
    future_cov = np.ascontiguousarray(future_cov[:, :horizon], dtype=np.float32)
    hist_cov = np.asarray(hist_cov, dtype=np.float32)
    hist_index = np.asarray(hist_index, dtype=np.float32)
    gen.eval()
    chunks = [list(range(a, min(a + chunk, n_traj))) for a in range(0, n_traj, chunk)]

    def work(js):
        return _run_chunk(gen, js, seed, hist_cov, hist_index, future_cov, months[:horizon], clamp, trace)

    with threadpool_limits(limits=1):
        if threads > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(work, chunks))
        else:
            results = [work(js) for js in chunks]
    data = np.concatenate([r[0] for r in results], axis=0)
    clamped = sum(r[1] for r in results)
    if index_stats is not None:
        mu, sd = index_stats
        data = (data.astype(np.float64) * sd + mu).astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise FloatingPointError("generated trajectories contain non-finite values")
    return TrajectoryEnsemble(
        scenario, months[:horizon].copy(), data, [(seed, j) for j in range(n_traj)], clamped / data.size
    )


def ensemble_mean(ens: TrajectoryEnsemble | np.ndarray) -> np.ndarray:
    data = ens.data if isinstance(ens, TrajectoryEnsemble) else np.asarray(ens)
    return data.astype(np.float64).mean(axis=0)


def save_ensemble(ens: TrajectoryEnsemble, out: str | os.PathLike, index_name: str = "swi") -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["trajectory", "master_seed", "counter", "file", "scenario"])
        for j in range(ens.n_traj):
            name = f"traj_{j:05d}.grd"
            save_grid_stack(out / name, GridStack(index_name, ens.months, ens.data[j]))
            w.writerow([j, ens.seeds[j][0], ens.seeds[j][1], name, ens.scenario])


def load_ensemble(path: str | os.PathLike) -> TrajectoryEnsemble:
    path = Path(path)
    manifest = path / "manifest.csv"
    if not manifest.exists():
        raise DataError(f"{path}: no manifest.csv")
    with open(manifest, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"{path}: empty ensemble")
    stacks = [load_grid_stack(path / r["file"]) for r in rows]
    months = stacks[0].months
    for s in stacks[1:]:
        if not np.array_equal(s.months, months):
            raise DataError("trajectories have different time axes")
    seeds = [(int(r["master_seed"]), int(r["counter"])) for r in rows]
    return TrajectoryEnsemble(rows[0]["scenario"], months, np.stack([s.data for s in stacks]), seeds)
