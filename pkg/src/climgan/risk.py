"""Drought eligibility and insured-loss distribution from index trajectories.

Per simulated year: yearly index = driest month (per-pixel minimum); a pixel
is abnormal when that value is at or below the empirical 1/RP quantile of
its reference series; a commune is eligible when enough of its pixels are
abnormal, and potentially eligible when enough of its neighbours are
eligible.  Buildings in eligible communes are priced with

    C(x) = a + b*x - a*exp(-k*x),   k = a / (5b)

which is zero at x = 0 and approaches a + b*x.  The printed variant
a + b*x - b*exp(-k*x) with k = -a/(5b) is kept behind ``compat``.
"""
from __future__ import annotations

import configparser
import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ELIGIBLE, POTENTIAL, NOT_ELIGIBLE = "eligible", "potentially_eligible", "not_eligible"
MIN_REFERENCE_YEARS = 10


class RiskError(ValueError):
    pass


# -- aggregation and abnormality -------------------------------------------------------

def yearly_swi(monthly: np.ndarray) -> np.ndarray:
    monthly = np.asarray(monthly)
    if monthly.shape[0] != 12:
        raise RiskError(f"need 12 monthly rasters, got {monthly.shape[0]}")
    return monthly.min(axis=0)


def yearly_series(months: np.ndarray, data: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Driest-month values for every complete calendar year; data is [..., T, H, W]."""
    months = np.asarray(months).reshape(-1, 2)
    years, out = [], []
    for y in np.unique(months[:, 0]):
        sel = np.flatnonzero(months[:, 0] == y)
        if sorted(months[sel, 1].tolist()) != list(range(1, 13)):
            continue
        years.append(int(y))
        out.append(np.min(np.take(data, sel, axis=-3), axis=-3))
    if not years:
        raise RiskError("no complete calendar year in the series")
    return np.array(years), np.stack(out, axis=-3)


def empirical_quantile(x: np.ndarray, level: float, axis=None) -> np.ndarray:
    """Linear interpolation between order statistics (type 7)."""
    return np.quantile(np.asarray(x, dtype=np.float64), level, axis=axis)


def abnormal_pixels(yearly: np.ndarray, reference: np.ndarray, return_period: float) -> np.ndarray:
    """yearly [H, W] vs reference [Y, H, W]: True where yearly <= quantile(reference, 1/RP)."""
    reference = np.asarray(reference)
    if reference.shape[0] < MIN_REFERENCE_YEARS:
        raise RiskError(f"reference holds {reference.shape[0]} years, need at least {MIN_REFERENCE_YEARS}")
    if return_period < 1:
        raise RiskError("return period must be >= 1 year")
    return np.asarray(yearly) <= empirical_quantile(reference, 1.0 / return_period, axis=0)


# -- communes ----------------------------------------------------------------------------

@dataclass
class CommuneTable:
    ids: list[str]
    pixels: list[np.ndarray]  # each [P, 2] (row, col)
    buildings: np.ndarray  # [K] int
    neighbors: list[list[int]]  # positions into ids

    def __post_init__(self):
        self.buildings = np.asarray(self.buildings, dtype=np.int64)
        k = len(self.ids)
        if len(set(self.ids)) != k:
            raise RiskError("commune ids must be unique")
        if not (len(self.pixels) == len(self.neighbors) == len(self.buildings) == k):
            raise RiskError("commune table columns differ in length")
        if np.any(self.buildings < 0):
            raise RiskError("building counts must be non-negative")
        seen = set()
        for i, px in enumerate(self.pixels):
            px = np.asarray(px, dtype=np.int64).reshape(-1, 2)
            self.pixels[i] = px
            for r, c in px.tolist():
                if (r, c) in seen:
                    raise RiskError(f"pixel {(r, c)} belongs to more than one commune")
                seen.add((r, c))
        for i, nb in enumerate(self.neighbors):
            for j in nb:
                if i not in self.neighbors[j]:
                    raise RiskError(f"neighbour relation not symmetric between {self.ids[i]} and {self.ids[j]}")

    def __len__(self) -> int:
        return len(self.ids)

    def check_grid(self, h: int, w: int) -> None:
        for cid, px in zip(self.ids, self.pixels):
            if px.size and (px[:, 0].max() >= h or px[:, 1].max() >= w or px.min() < 0):
                raise RiskError(f"commune {cid} has pixels outside the {h}x{w} grid")


def read_communes(path: str | os.PathLike) -> CommuneTable:
    """CSV columns id, pixel_list ("r:c;r:c"), buildings, neighbors ("id;id")."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(rows[0]) != {"id", "pixel_list", "buildings", "neighbors"}:
        raise RiskError(f"{path}: expected columns id, pixel_list, buildings, neighbors")
    ids = [r["id"] for r in rows]
    pos = {cid: i for i, cid in enumerate(ids)}
    pixels, nbs = [], []
    for r in rows:
        pts = [tuple(int(v) for v in p.split(":")) for p in r["pixel_list"].split(";") if p]
        pixels.append(np.array(pts, dtype=np.int64).reshape(-1, 2))
        try:
            nbs.append([pos[n] for n in r["neighbors"].split(";") if n])
        except KeyError as exc:
            raise RiskError(f"unknown neighbour {exc} of commune {r['id']}") from None
    return CommuneTable(ids, pixels, [int(r["buildings"]) for r in rows], nbs)


def write_communes(table: CommuneTable, path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "pixel_list", "buildings", "neighbors"])
        for i, cid in enumerate(table.ids):
            px = ";".join(f"{r}:{c}" for r, c in table.pixels[i].tolist())
            nb = ";".join(table.ids[j] for j in table.neighbors[i])
            w.writerow([cid, px, int(table.buildings[i]), nb])


def rectangular_communes(h: int, w: int, block: int, seed: int, max_buildings: int = 5000) -> CommuneTable:
    """Partition the grid into block x block communes with 4-neighbour adjacency."""
    rng = np.random.default_rng(seed)
    nr, nc = math.ceil(h / block), math.ceil(w / block)
    ids, pixels, nbs = [], [], []
    for i in range(nr):
        for j in range(nc):
            ids.append(f"C{i:02d}{j:02d}")
            rr, cc = np.mgrid[i * block:min(h, (i + 1) * block), j * block:min(w, (j + 1) * block)]
            pixels.append(np.stack([rr.ravel(), cc.ravel()], axis=1))
            nb = []
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                a, b = i + di, j + dj
                if 0 <= a < nr and 0 <= b < nc:
                    nb.append(a * nc + b)
            nbs.append(nb)
    buildings = rng.integers(0, max_buildings + 1, len(ids))
    return CommuneTable(ids, pixels, buildings, nbs)


def commune_eligibility(abnormal: np.ndarray, communes: CommuneTable, pixel_fraction: float = 0.5,
                        neighbor_fraction: float = 0.5) -> list[str]:
    abnormal = np.asarray(abnormal, dtype=bool)
    eligible = []
    for px in communes.pixels:
        frac = abnormal[px[:, 0], px[:, 1]].mean() if len(px) else 0.0
        eligible.append(bool(len(px)) and frac >= pixel_fraction)
    status = []
    for i, el in enumerate(eligible):
        if el:
            status.append(ELIGIBLE)
            continue
        nb = communes.neighbors[i]
        if nb and sum(eligible[j] for j in nb) / len(nb) >= neighbor_fraction:
            status.append(POTENTIAL)
        else:
            status.append(NOT_ELIGIBLE)
    return status


# -- cost --------------------------------------------------------------------------------

@dataclass(frozen=True)
class CostModel:
    a: float = 464.4
    b: float = 4.121e8
    compat: bool = False

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise RiskError("cost parameters a and b must be positive")

    @property
    def k(self) -> float:
        return -self.a / (5 * self.b) if self.compat else self.a / (5 * self.b)

    def gap(self, x) -> np.ndarray:
        """(a + b*x) - C(x)."""
        x = np.asarray(x, dtype=np.float64)
        if self.compat:
            return self.b * np.exp(-self.k * x)
        return self.a * np.exp(-self.k * x)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if np.any(x < 0):
            raise RiskError("building count must be non-negative")
        a, b, k = self.a, self.b, self.k
        if self.compat:
            return a + b * x - b * np.exp(-k * x)
        return a + b * x - a * np.exp(-k * x)


def cost(x, model: CostModel | None = None) -> np.ndarray:
    return (model or CostModel())(x)


# -- loss distribution -------------------------------------------------------------------

@dataclass
class RiskConfig:
    return_period: float = 25.0
    pixel_fraction: float = 0.5
    neighbor_fraction: float = 0.5
    per_commune: bool = False
    dynamic_reference: bool = True
    var_level: float = 0.995
    a: float = 464.4
    b: float = 4.121e8
    compat: bool = False

    @property
    def model(self) -> CostModel:
        return CostModel(self.a, self.b, self.compat)


def load_risk_config(path: str | os.PathLike | None) -> RiskConfig:
    from .config import update_from_mapping

    cfg = RiskConfig()
    if path is None:
        return cfg
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    cp.read_string(Path(path).read_text(encoding="utf-8"))
    for sec in cp.sections():
        if sec != "risk":
            raise RiskError(f"unknown section [{sec}] in risk config")
        update_from_mapping(cfg, dict(cp.items("risk")), "risk")
    if cfg.return_period < 1 or not 0 < cfg.var_level <= 1:
        raise RiskError("return_period must be >= 1 and var_level in (0, 1]")
    return cfg


@dataclass
class LossRecord:
    trajectory: int
    year: int
    eligible_communes: int
    exposed_buildings: int
    cost_eur: float


@dataclass
class CostDistribution:
    years: np.ndarray  # [Y]
    costs: np.ndarray  # [M, Y]
    records: list[LossRecord] = field(default_factory=list)

    def per_year(self, year: int) -> np.ndarray:
        return self.costs[:, int(np.flatnonzero(self.years == year)[0])]

    def max_per_trajectory(self) -> np.ndarray:
        return self.costs.max(axis=1)

    def quantile(self, level: float, year: int | None = None) -> float:
        sample = self.max_per_trajectory() if year is None else self.per_year(year)
        return value_at_risk(sample, level)


def loss_distribution(trajectories: np.ndarray, months: np.ndarray, reference: np.ndarray,
                      communes: CommuneTable, cfg: RiskConfig | None = None) -> CostDistribution:
    """trajectories [M, T, H, W] physical index values; reference [Y, H, W] historical yearly minima."""
    cfg = cfg or RiskConfig()
    model = cfg.model
    trajectories = np.asarray(trajectories)
    communes.check_grid(*trajectories.shape[-2:])
    years, yearly = yearly_series(months, trajectories)  # yearly [M, Y, H, W]
    reference = np.asarray(reference, dtype=np.float64)
    if reference.shape[0] < MIN_REFERENCE_YEARS:
        raise RiskError(f"reference holds {reference.shape[0]} years, need at least {MIN_REFERENCE_YEARS}")
    m = trajectories.shape[0]
    costs = np.zeros((m, len(years)))
    records = []
    for j in range(m):
        ref = list(reference)
        for yi, year in enumerate(years):
            abn = abnormal_pixels(yearly[j, yi], np.stack(ref), cfg.return_period)
            status = commune_eligibility(abn, communes, cfg.pixel_fraction, cfg.neighbor_fraction)
            mask = np.array([s == ELIGIBLE for s in status])
            x = int(communes.buildings[mask].sum())
            if cfg.per_commune:
                c = float(np.sum(model(communes.buildings[mask]))) if mask.any() else 0.0
            else:
                c = float(model(x))
            costs[j, yi] = c
            records.append(LossRecord(j, int(year), int(mask.sum()), x, c))
            if cfg.dynamic_reference:
                ref.append(yearly[j, yi].astype(np.float64))
    return CostDistribution(years, costs, records)


def value_at_risk(sample: np.ndarray, level: float) -> float:
    if not 0 <= level <= 1:
        raise RiskError("level must lie in [0, 1]")
    return float(empirical_quantile(np.asarray(sample, dtype=np.float64), level))


def write_losses(dist: CostDistribution, path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["trajectory", "year", "eligible_communes", "exposed_buildings", "cost_eur"])
        for r in dist.records:
            w.writerow([r.trajectory, r.year, r.eligible_communes, r.exposed_buildings, repr(r.cost_eur)])
