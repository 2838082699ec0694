"""Per-pixel trajectory metrics, averaged over the ensemble, and their pixel quantiles.

For observed y_1..y_n and trajectory j:

    MSE_j   = mean (y - yhat_j)^2          RMSE_j = sqrt(MSE_j)
    MAE_j   = mean |y - yhat_j|
    SMAPE_j = mean |y - yhat_j| / ((|y| + |yhat_j|)/2) * 100
    R2_j    = 1 - sum (y - yhat_j)^2 / sum (y - ybar)^2
    rho_j   = Pearson correlation of y and yhat_j

Each raster is the mean over trajectories of the per-trajectory values.
"""
from __future__ import annotations

import csv
import os
import warnings

import numpy as np

METRICS = ("mse", "rmse", "mae", "smape", "r2", "rho")
QUANTILES = (0.1, 0.2, 0.5, 0.8, 0.9)
SMAPE_GUARD = 1e-12


def per_trajectory_metrics(observed: np.ndarray, gen: np.ndarray) -> dict[str, np.ndarray]:
    """observed [n, H, W], gen [M, n, H, W] -> metric -> [M, H, W]."""
    y = np.asarray(observed, dtype=np.float64)
    g = np.asarray(gen, dtype=np.float64)
    if g.ndim == 3:
        g = g[None]
    if g.shape[1:] != y.shape:
        raise ValueError(f"observed {y.shape} and generated {g.shape[1:]} do not share time axis and grid")
    err = g - y[None]
    mse = np.mean(err ** 2, axis=1)
    denom = (np.abs(y)[None] + np.abs(g)) / 2.0
    safe = np.where(denom < SMAPE_GUARD / 2.0, 1.0, denom)
    terms = np.where(denom < SMAPE_GUARD / 2.0, 0.0, np.abs(err) / safe)
    yc = y - y.mean(axis=0)
    gc = g - g.mean(axis=1, keepdims=True)
    ss_tot = np.sum(yc ** 2, axis=0)
    ss_res = np.sum(err ** 2, axis=1)
    cross = np.sum(yc[None] * gc, axis=1)
    # exact test: the centred sum of a constant series can pick up rounding
    sg = np.where(np.all(g == g[:, :1], axis=1), 0.0, np.sum(gc ** 2, axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = np.where(ss_tot > 0, 1.0 - ss_res / np.where(ss_tot > 0, ss_tot, 1.0), np.nan)
        rho = np.where((ss_tot > 0) & (sg > 0), cross / np.sqrt(ss_tot * sg), np.nan)
    perfect = np.all(err == 0, axis=1) & (ss_tot > 0)
    rho = np.where(perfect, 1.0, np.clip(rho, -1.0, 1.0))
    return {
        "mse": mse, "rmse": np.sqrt(mse), "mae": np.mean(np.abs(err), axis=1),
        "smape": np.mean(terms, axis=1) * 100.0, "r2": r2, "rho": rho,
    }


def compute_metrics(observed: np.ndarray, gen: np.ndarray) -> dict[str, np.ndarray]:
    """Metric rasters [H, W]; pixels with zero observed variance carry NaN for R2 and rho."""
    per = per_trajectory_metrics(observed, gen)
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for k, v in per.items():
            out[k] = np.nanmean(v, axis=0) if k in ("r2", "rho") else v.mean(axis=0)
    return out


def summarize(rasters: dict[str, np.ndarray]) -> list[dict]:
    """Pixel quantiles (10/20/50/80/90) and max per metric, ignoring NaN pixels."""
    rows = []
    for name, r in rasters.items():
        vals = np.asarray(r, dtype=np.float64).ravel()
        vals = vals[np.isfinite(vals)]
        row = {"metric": name, "n_pixels": int(vals.size)}
        for q in QUANTILES:
            row[f"q{int(round(q * 100))}"] = float(np.quantile(vals, q)) if vals.size else float("nan")
        row["max"] = float(vals.max()) if vals.size else float("nan")
        rows.append(row)
    return rows


def write_summary(rows: list[dict], path: str | os.PathLike) -> None:
    cols = ["metric", "n_pixels"] + [f"q{int(round(q * 100))}" for q in QUANTILES] + ["max"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in rows:
            w.writerow([row[c] if c in ("metric", "n_pixels") else repr(row[c]) for c in cols])
