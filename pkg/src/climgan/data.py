"""Raster stacks, monthly aggregation, normalization, context windows and synthetic data.

GRD1 grid-stack file (one variable per file, integers little-endian)::

    b"GRD1"
    u64 H, u64 W, u64 T, u64 name_len, name bytes (utf-8)
    T x (i32 year, i32 month)
    T*H*W float32, row-major [T, H, W]

A dataset directory holds one ``<name>.grd`` per variable plus
``dataset.cfg`` naming the covariates (in channel order), the index
variable and the chronological splits as inclusive year ranges.
"""
from __future__ import annotations

import calendar
import configparser
import datetime as dt
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

GRD_MAGIC = b"GRD1"
_HDR = struct.Struct("<QQQQ")

# tabulated variables plus wind speed, which the 11-covariate count requires; see aggregate_daily_to_monthly.
PUBLISHED_VARIABLES = ("huss", "prtot", "rlds", "rsds", "sfcWind", "tas", "tasmax", "tasmin", "evspsblpot")
PRECIP_VARIABLE = "prtot"
PUBLISHED_SPLITS = {"train": (1960, 2020), "val": (2021, 2022), "test": (2023, 2024)}
SIGMA_FLOOR = 1e-8


class DataError(ValueError):
    pass


# -- grid-stack files --------------------------------------------------------

@dataclass
class GridStack:
    name: str
    months: np.ndarray  # [T, 2] int (year, month)
    data: np.ndarray  # [T, H, W] float32

    def __post_init__(self):
        self.months = np.asarray(self.months, dtype=np.int32).reshape(-1, 2)
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[0] != len(self.months):
            raise DataError(f"{self.name}: data {self.data.shape} does not match {len(self.months)} months")


def save_grid_stack(path: str | os.PathLike, stack: GridStack) -> None:
    t, h, w = stack.data.shape
    raw = stack.name.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(GRD_MAGIC)
        fh.write(_HDR.pack(h, w, t, len(raw)))
        fh.write(raw)
        fh.write(np.ascontiguousarray(stack.months, dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(stack.data, dtype="<f4").tobytes())


def load_grid_stack(path: str | os.PathLike) -> GridStack:
    blob = Path(path).read_bytes()
    if blob[:4] != GRD_MAGIC:
        raise DataError(f"{path}: not a GRD1 grid stack")
    if len(blob) < 4 + _HDR.size:
        raise DataError(f"{path}: truncated header")
    h, w, t, n = _HDR.unpack_from(blob, 4)
    pos = 4 + _HDR.size
    name = blob[pos:pos + n].decode("utf-8")
    pos += n
    need = pos + 8 * t + 4 * t * h * w
    if len(blob) != need:
        raise DataError(f"{path}: expected {need} bytes, found {len(blob)}")
    months = np.frombuffer(blob, dtype="<i4", count=2 * t, offset=pos).reshape(t, 2).astype(np.int32)
    pos += 8 * t
    data = np.frombuffer(blob, dtype="<f4", count=t * h * w, offset=pos).reshape(t, h, w).astype(np.float32)
    return GridStack(name, months, data)


# -- monthly aggregation ------------------------------------------------------

def aggregate_daily_to_monthly(
    daily: np.ndarray, dates: Sequence[dt.date], variable: str
) -> dict[str, GridStack]:
    """Per-pixel monthly maxima; precipitation also yields monthly total and average.

    Every month touched by ``dates`` must be complete (leap days included).
    Returns ``{variable: max}`` plus ``{prtot_sum, prtot_avg}`` for precipitation.
    """
    daily = np.asarray(daily, dtype=np.float64)
    if daily.ndim != 3 or daily.shape[0] != len(dates):
        raise DataError("daily stack must be [days, H, W] with one date per day")
    by_month: dict[tuple[int, int], list[int]] = {}
    for i, d in enumerate(dates):
        by_month.setdefault((d.year, d.month), []).append(i)
    keys = sorted(by_month)
    problems = []
    for y, m in keys:
        have = {dates[i].day for i in by_month[(y, m)]}
        if len(have) != len(by_month[(y, m)]):
            problems.append(f"{y}-{m:02d}: duplicate days")
        missing = sorted(set(range(1, calendar.monthrange(y, m)[1] + 1)) - have)
        if missing:
            problems.append(f"{y}-{m:02d}: missing days {missing}")
    if problems:
        raise DataError("incomplete months: " + "; ".join(problems))
    months = np.array(keys, dtype=np.int32)
    mx = np.stack([daily[by_month[k]].max(axis=0) for k in keys])
    out = {variable: GridStack(variable, months, mx)}
    if variable == PRECIP_VARIABLE:
        tot = np.stack([daily[by_month[k]].sum(axis=0) for k in keys])
        days = np.array([len(by_month[k]) for k in keys], dtype=np.float64)[:, None, None]
        out[f"{variable}_sum"] = GridStack(f"{variable}_sum", months, tot)
        out[f"{variable}_avg"] = GridStack(f"{variable}_avg", months, tot / days)
    return out


def published_covariate_names() -> list[str]:
    names = []
    for v in PUBLISHED_VARIABLES:
        names.append(v)
        if v == PRECIP_VARIABLE:
            names += [f"{v}_sum", f"{v}_avg"]
    return names


# -- dataset -------------------------------------------------------------------

@dataclass
class ClimateDataset:
    months: np.ndarray  # [T, 2]
    covariates: dict[str, np.ndarray]  # ordered name -> [T, H, W]
    index: np.ndarray  # [T, H, W]
    splits: dict[str, tuple[int, int]]
    index_name: str = "swi"
    norm_stats: dict[str, tuple[float, float]] = field(default_factory=dict)
    normalized: bool = False

    def __post_init__(self):
        self.months = np.asarray(self.months, dtype=np.int32).reshape(-1, 2)
        t = len(self.months)
        self.index = np.asarray(self.index, dtype=np.float32)
        shape = self.index.shape
        if len(shape) != 3 or shape[0] != t:
            raise DataError(f"index stack {shape} does not match {t} months")
        for name, arr in self.covariates.items():
            if np.shape(arr) != shape:
                raise DataError(f"covariate {name} has shape {np.shape(arr)}, expected {shape}")
        for name in self.splits:
            if name not in ("train", "val", "test"):
                raise DataError(f"unknown split {name!r}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.index.shape[1], self.index.shape[2]

    @property
    def n_months(self) -> int:
        return len(self.months)

    @property
    def covariate_names(self) -> list[str]:
        return list(self.covariates)

    def split_mask(self, split: str) -> np.ndarray:
        lo, hi = self.splits[split]
        years = self.months[:, 0]
        return (years >= lo) & (years <= hi)

    def split_range(self, split: str) -> tuple[int, int]:
        """[start, stop) month indices of a split."""
        idx = np.flatnonzero(self.split_mask(split))
        if idx.size == 0:
            raise DataError(f"split {split!r} is empty")
        return int(idx[0]), int(idx[-1]) + 1

    def variables(self) -> dict[str, np.ndarray]:
        return {**self.covariates, self.index_name: self.index}

    def check_finite(self) -> None:
        for name, arr in self.variables().items():
            if not np.all(np.isfinite(arr)):
                raise DataError(f"variable {name} contains missing or non-finite values")


def compute_norm_stats(ds: ClimateDataset) -> dict[str, tuple[float, float]]:
    mask = ds.split_mask("train")
    if not mask.any():
        raise DataError("training split is empty")
    stats = {}
    for name, arr in ds.variables().items():
        sub = np.asarray(arr, dtype=np.float64)[mask]
        stats[name] = (float(sub.mean()), max(float(sub.std()), SIGMA_FLOOR))
    return stats


def normalize(ds: ClimateDataset) -> ClimateDataset:
    """Standardize every variable with statistics from the training split only."""
    if ds.normalized:
        return ds
    stats = compute_norm_stats(ds)

    def z(name, arr):
        mu, sd = stats[name]
        return ((np.asarray(arr, dtype=np.float64) - mu) / sd).astype(np.float32)

    return replace(
        ds,
        covariates={k: z(k, v) for k, v in ds.covariates.items()},
        index=z(ds.index_name, ds.index),
        norm_stats=stats,
        normalized=True,
    )


def denormalize_array(arr: np.ndarray, stats: tuple[float, float]) -> np.ndarray:
    mu, sd = stats
    return (np.asarray(arr, dtype=np.float64) * sd + mu).astype(np.float32)


def normalize_array(arr: np.ndarray, stats: tuple[float, float]) -> np.ndarray:
    mu, sd = stats
    return ((np.asarray(arr, dtype=np.float64) - mu) / sd).astype(np.float32)


def denormalize(ds: ClimateDataset) -> ClimateDataset:
    if not ds.normalized:
        return ds
    return replace(
        ds,
        covariates={k: denormalize_array(v, ds.norm_stats[k]) for k, v in ds.covariates.items()},
        index=denormalize_array(ds.index, ds.norm_stats[ds.index_name]),
        normalized=False,
    )


# -- context windows ---------------------------------------------------------

def cond_channel_layout(names: Sequence[str], lag: int) -> list[tuple[str, int]]:
    """(variable, lag) per conditioning channel: covariates lag 0..u, then index lags 1..u."""
    layout = [(n, l) for n in names for l in range(lag + 1)]
    return layout + [("__index__", l) for l in range(1, lag + 1)]


def assemble_cond(cov_window: np.ndarray, index_lags: np.ndarray) -> np.ndarray:
    """Stack one conditioning tensor.

    cov_window: [C, u+1, H, W] with lag 0 (month t) first.
    index_lags: [u, H, W], most recent (t-1) first.
    """
    c, l1, h, w = cov_window.shape
    return np.concatenate([cov_window.reshape(c * l1, h, w), index_lags], axis=0).astype(np.float32)


@dataclass
class SampleSet:
    cond: np.ndarray  # [S, cond_channels, H, W]
    months: np.ndarray  # [S] calendar month 1..12
    target: np.ndarray  # [S, 1, H, W]
    times: np.ndarray  # [S] month index of the target in the dataset

    def __len__(self) -> int:
        return len(self.times)

    def subset(self, idx) -> "SampleSet":
        return SampleSet(self.cond[idx], self.months[idx], self.target[idx], self.times[idx])


def build_contexts(ds: ClimateDataset, lag: int, split: str | None = None) -> SampleSet:
    """One teacher-forced sample per month t >= lag; ``split`` filters by the target's year."""
    if lag < 1:
        raise DataError("lag must be >= 1")
    t_all = np.arange(lag, ds.n_months)
    if split is not None:
        t_all = t_all[ds.split_mask(split)[t_all]]
    cov = np.stack([ds.covariates[n] for n in ds.covariate_names])  # [C, T, H, W]
    h, w = ds.grid
    cond = np.empty((len(t_all), len(ds.covariates) * (lag + 1) + lag, h, w), dtype=np.float32)
    for i, t in enumerate(t_all):
        window = cov[:, t - lag:t + 1][:, ::-1]
        cond[i] = assemble_cond(window, ds.index[t - lag:t][::-1])
    return SampleSet(cond, ds.months[t_all, 1].astype(np.int64), ds.index[t_all][:, None].copy(), t_all)


# -- directory I/O -------------------------------------------------------------

def save_dataset(ds: ClimateDataset, out: str | os.PathLike, extra: dict[str, dict[str, str]] | None = None) -> None:
    if ds.normalized:
        raise DataError("save the raw (denormalized) dataset")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for name, arr in ds.variables().items():
        save_grid_stack(out / f"{name}.grd", GridStack(name, ds.months, arr))
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    h, w = ds.grid
    cp["dataset"] = {
        "grid_h": str(h), "grid_w": str(w),
        "covariates": ",".join(ds.covariate_names), "index": ds.index_name,
    }
    cp["splits"] = {k: f"{a},{b}" for k, (a, b) in ds.splits.items()}
    for sec, vals in (extra or {}).items():
        cp[sec] = vals
    with open(out / "dataset.cfg", "w", encoding="utf-8") as fh:
        cp.write(fh)


def read_dataset_cfg(path: str | os.PathLike) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cfg_path = Path(path) / "dataset.cfg"
    if not cfg_path.exists():
        raise DataError(f"{path}: no dataset.cfg")
    cp.read(cfg_path, encoding="utf-8")
    return cp


def load_dataset(path: str | os.PathLike) -> ClimateDataset:
    path = Path(path)
    cp = read_dataset_cfg(path)
    sec = cp["dataset"]
    names = [n for n in sec["covariates"].split(",") if n]
    index_name = sec["index"]
    stacks = {n: load_grid_stack(path / f"{n}.grd") for n in names + [index_name]}
    months = stacks[index_name].months
    for n, s in stacks.items():
        if not np.array_equal(s.months, months):
            raise DataError(f"variable {n} has a different time axis")
    splits = {k: tuple(int(v) for v in val.split(",")) for k, val in cp["splits"].items()}
    ds = ClimateDataset(months, {n: stacks[n].data for n in names}, stacks[index_name].data, splits, index_name)
    ds.check_finite()
    return ds


def load_covariate_stacks(path: str | os.PathLike, names: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    """Scenario covariates: returns (months [T,2], stack [C, T, H, W]) in the given order."""
    path = Path(path)
    stacks = []
    months = None
    for n in names:
        f = path / f"{n}.grd"
        if not f.exists():
            raise DataError(f"scenario directory {path} lacks covariate {n}")
        s = load_grid_stack(f)
        if months is not None and not np.array_equal(months, s.months):
            raise DataError(f"scenario covariate {n} has a different time axis")
        months = s.months
        stacks.append(s.data)
    return months, np.stack(stacks)


def month_sequence(start: tuple[int, int], n: int) -> np.ndarray:
    y, m = start
    out = []
    for _ in range(n):
        out.append((y, m))
        m += 1
        if m > 12:
            y, m = y + 1, 1
    return np.array(out, dtype=np.int32).reshape(-1, 2)


# -- synthetic data ------------------------------------------------------------

@dataclass
class SynthSpec:
    """Desk-scale synthetic climate.

    Covariates (normalized units before storage):
      driver  = seasonal sinusoid + spatial Gaussian bump + AR(1) noise
      aux     = phase-shifted sinusoid + a second bump + AR(1) noise
      null    = AR(1) noise only, never used by the index

    Index, per pixel and purely local:
      I_t = p * I_{t-1} + (1 - p) * (0.5 - 0.4 * tanh(driver_t / s)) + e_t,  e_t ~ N(0, noise^2)
    """

    grid_h: int = 16
    grid_w: int = 16
    start_year: int = 1990
    train_end: int = 2005
    val_end: int = 2007
    test_end: int = 2009
    scenario_years: int = 2
    persistence: float = 0.25
    driver_scale: float = 1.0
    index_noise: float = 0.02
    ar_coef: float = 0.6
    ar_sd: float = 0.5
    seed: int = 0


def parse_synth_spec(text: str) -> SynthSpec:
    from .config import update_from_mapping

    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    cp.read_string(text)
    spec = SynthSpec()
    for sec in cp.sections():
        if sec != "synth":
            raise DataError(f"unknown section [{sec}] in synthetic spec")
        update_from_mapping(spec, dict(cp.items("synth")), "synth")
    return spec


def _ar1(rng, shape, coef, sd):
    t = shape[0]
    out = np.empty(shape)
    state = rng.standard_normal(shape[1:]) * sd / np.sqrt(1 - coef ** 2)
    for i in range(t):
        state = coef * state + sd * rng.standard_normal(shape[1:])
        out[i] = state
    return out


def _bump(h, w, cy, cx, width):
    yy, xx = np.mgrid[0:h, 0:w]
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))


def synthesize(spec: SynthSpec) -> tuple[ClimateDataset, np.ndarray, dict[str, np.ndarray]]:
    """Returns (dataset, scenario months, scenario covariates) with a fixed seed."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.grid_h, spec.grid_w
    years = spec.test_end - spec.start_year + 1 + spec.scenario_years
    t = 12 * years
    months = month_sequence((spec.start_year, 1), t)
    phase = 2 * np.pi * (months[:, 1] - 1) / 12.0
    season = np.cos(phase)[:, None, None]
    driver = (
        1.0 * season
        + 0.5 * _bump(h, w, h * 0.3, w * 0.6, max(h, w) / 4)[None]
        + _ar1(rng, (t, h, w), spec.ar_coef, spec.ar_sd)
    )
    aux = (
        np.sin(phase)[:, None, None]
        + 0.5 * _bump(h, w, h * 0.7, w * 0.3, max(h, w) / 5)[None]
        + _ar1(rng, (t, h, w), spec.ar_coef, spec.ar_sd)
    )
    null = _ar1(rng, (t, h, w), spec.ar_coef, spec.ar_sd)
    p = spec.persistence
    index = np.empty((t, h, w))
    state = np.full((h, w), 0.5)
    eps = rng.standard_normal((t, h, w)) * spec.index_noise
    for i in range(t):
        state = p * state + (1 - p) * (0.5 - 0.4 * np.tanh(driver[i] / spec.driver_scale)) + eps[i]
        index[i] = state
    n_hist = 12 * (spec.test_end - spec.start_year + 1)
    cov = {"driver": driver, "aux": aux, "null": null}
    ds = ClimateDataset(
        months[:n_hist],
        {k: v[:n_hist].astype(np.float32) for k, v in cov.items()},
        index[:n_hist].astype(np.float32),
        {
            "train": (spec.start_year, spec.train_end),
            "val": (spec.train_end + 1, spec.val_end),
            "test": (spec.val_end + 1, spec.test_end),
        },
    )
    scenario = {k: v[n_hist:].astype(np.float32) for k, v in cov.items()}
    scenario[ds.index_name] = index[n_hist:].astype(np.float32)
    return ds, months[n_hist:], scenario
