"""Command-line entry point: ``climgan <subcommand> ...``.

Exit status: 0 on success, 2 on usage errors, 1 when a precondition fails
(missing files, inconsistent data, invalid configuration).  Every run writes
a ``manifest.json`` describing what produced its outputs.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .config import ConfigError, load_run_config
from .serialization import FormatError


class Failure(RuntimeError):
    """Precondition failure reported with exit status 1."""


# -- helpers -------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _outputs(paths: list[Path]) -> dict[str, str]:
    files = []
    for p in paths:
        if p.is_dir():
            files += sorted(f for f in p.rglob("*") if f.is_file() and f.name != "manifest.json")
        elif p.is_file():
            files.append(p)
    return {str(f): _sha256(f) for f in files}


def _config_hash(args: argparse.Namespace, files: list[str | None]) -> str:
    h = hashlib.sha256()
    skip = {"func", "threads", "manifest", "extra"}
    for k in sorted(vars(args)):
        if k not in skip:
            h.update(f"{k}={getattr(args, k)!r};".encode())
    for f in files:
        if f and Path(f).is_file():
            h.update(Path(f).read_bytes())
    return h.hexdigest()


def write_manifest(path: Path, args, seed, outputs: list[Path], started: float, config_files=()) -> None:
    from .kernels import BACKEND

    manifest = {
        "subcommand": args.command if not getattr(args, "data_command", None) else f"data {args.data_command}",
        "config_hash": _config_hash(args, list(config_files)),
        "seed": seed,
        "versions": {
            "climgan": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "kernel_backend": BACKEND,
        },
        "threads": args.threads,
        "outputs": _outputs(outputs),
        "wall_time_s": round(time.perf_counter() - started, 3),
    }
    manifest.update(getattr(args, "extra", None) or {})
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _manifest_path(args, out: Path | None) -> Path:
    if args.manifest:
        return Path(args.manifest)
    if out is None:
        return Path("manifest.json")
    if out.suffix and not out.is_dir():
        return out.parent / f"{out.stem}.manifest.json"
    return out / "manifest.json"


def _parse_month(text: str) -> tuple[int, int]:
    try:
        y, m = (int(v) for v in text.split("-"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected YYYY-MM, got {text!r}") from None
    if not 1 <= m <= 12:
        raise argparse.ArgumentTypeError(f"month out of range in {text!r}")
    return y, m


def _parse_probe(text: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected r,c, got {text!r}") from None
    return r, c


def _normalization_section(ds) -> dict[str, str]:
    lo = float(ds.index[ds.split_mask("train")].min())
    hi = float(ds.index[ds.split_mask("train")].max())
    sec = {"covariates": ",".join(ds.covariate_names), "index": ds.index_name,
           "clamp_lo": repr(lo), "clamp_hi": repr(hi)}
    for name, (mu, sd) in ds.norm_stats.items():
        sec[f"mean.{name}"] = repr(mu)
        sec[f"std.{name}"] = repr(sd)
    return sec


def _apply_normalization(ds, norm: dict[str, str]):
    """Normalize a raw dataset with the statistics stored alongside the generator."""
    from dataclasses import replace

    from .data import normalize_array

    if not norm:
        raise Failure("generator sidecar has no [normalization] section")
    names = [n for n in norm["covariates"].split(",") if n]
    if names != ds.covariate_names:
        raise Failure(f"dataset covariates {ds.covariate_names} differ from training covariates {names}")
    stats = {k: (float(norm[f"mean.{k}"]), float(norm[f"std.{k}"])) for k in names + [norm["index"]]}
    return replace(
        ds,
        covariates={k: normalize_array(v, stats[k]) for k, v in ds.covariates.items()},
        index=normalize_array(ds.index, stats[ds.index_name]),
        norm_stats=stats, normalized=True,
    )


# -- subcommands -----------------------------------------------------------------------

def cmd_data_synth(args) -> tuple[list[Path], int, list]:
    from .data import SynthSpec, parse_synth_spec, save_dataset, save_grid_stack, GridStack, synthesize
    from .risk import rectangular_communes, write_communes

    spec = parse_synth_spec(Path(args.spec).read_text(encoding="utf-8")) if args.spec else SynthSpec()
    if args.seed is not None:
        spec.seed = args.seed
    ds, smonths, scen = synthesize(spec)
    out = Path(args.out)
    save_dataset(ds, out, {"synthetic": {k: repr(v) for k, v in vars(spec).items()}})
    sdir = out / "scenario"
    sdir.mkdir(exist_ok=True)
    for name, arr in scen.items():
        fname = f"truth_{name}.grd" if name == ds.index_name else f"{name}.grd"
        save_grid_stack(sdir / fname, GridStack(name, smonths, arr))
    write_communes(rectangular_communes(spec.grid_h, spec.grid_w, 4, spec.seed), out / "communes.csv")
    print(f"wrote {ds.n_months} months of {ds.grid[0]}x{ds.grid[1]} rasters to {out}")
    return [out], spec.seed, [args.spec]


def cmd_data_inspect(args) -> tuple[list[Path], int | None, list]:
    from .data import load_dataset

    ds = load_dataset(args.dir)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["section", "name", "grid_h", "grid_w", "n_months", "start", "end", "mean", "std", "min", "max"])
    first = f"{ds.months[0, 0]}-{ds.months[0, 1]:02d}"
    last = f"{ds.months[-1, 0]}-{ds.months[-1, 1]:02d}"
    h, wd = ds.grid
    for name, arr in ds.variables().items():
        a = np.asarray(arr, dtype=np.float64)
        w.writerow(["variable", name, h, wd, ds.n_months, first, last,
                    f"{a.mean():.6g}", f"{a.std():.6g}", f"{a.min():.6g}", f"{a.max():.6g}"])
    for split, (lo, hi) in ds.splits.items():
        n = int(ds.split_mask(split).sum())
        w.writerow(["split", split, h, wd, n, lo, hi, "", "", "", ""])
    return [], None, []


def cmd_train(args) -> tuple[list[Path], int, list]:
    from .data import build_contexts, load_dataset, normalize
    from .training import train

    cfg = load_run_config(args.config)
    cfg.train.seed = args.seed
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    ds = normalize(load_dataset(args.data))
    if ds.covariate_names and len(ds.covariate_names) != cfg.generator.n_covariates:
        raise Failure(f"dataset has {len(ds.covariate_names)} covariates, config expects {cfg.generator.n_covariates}")
    if ds.grid != (cfg.generator.grid_h, cfg.generator.grid_w):
        raise Failure(f"dataset grid {ds.grid} differs from configured {(cfg.generator.grid_h, cfg.generator.grid_w)}")
    samples = build_contexts(ds, cfg.generator.lag, "train")

    def progress(row):
        if not args.quiet:
            print(f"epoch {row['epoch']}: critic {row['critic_loss']:.4f} gen {row['gen_loss']:.4f} "
                  f"gp {row['gp']:.4f}", file=sys.stderr)

    state = train(samples, cfg, args.out, resume=args.resume, progress=progress,
                  normalization=_normalization_section(ds))
    # realized critic extents (H, W, C), recorded rather than assumed
    args.extra = {"critic_shapes": {k: list(v) for k, v in state.critic.shapes.items()}}
    return [Path(args.out)], args.seed, [args.config]


def _load_for_generation(args):
    from .data import load_dataset
    from .training import load_generator

    gen, norm = load_generator(args.params)
    ds = _apply_normalization(load_dataset(args.data), norm)
    return gen, norm, ds


def cmd_generate(args) -> tuple[list[Path], int, list]:
    from .data import load_covariate_stacks, normalize_array
    from .projection import project, save_ensemble

    gen, norm, ds = _load_for_generation(args)
    smonths, scov = load_covariate_stacks(args.scenario, ds.covariate_names)
    if args.start is not None:
        start = args.start
    else:
        y, m = (int(v) for v in ds.months[-1])
        start = (y + (m == 12), m % 12 + 1)
    keyed = [tuple(v) for v in ds.months.tolist()]
    hist_end = keyed.index(start) if start in keyed else None
    if hist_end is None:
        last = keyed[-1]
        if (last[0] * 12 + last[1]) + 1 != start[0] * 12 + start[1]:
            raise Failure(f"start {start[0]}-{start[1]:02d} is neither inside nor right after the observed record")
        hist_end = len(keyed)
    sel = np.flatnonzero(smonths[:, 0] * 12 + smonths[:, 1] >= start[0] * 12 + start[1])
    if sel.size == 0 or tuple(smonths[sel[0]]) != start:
        raise Failure(f"scenario covariates do not start at {start[0]}-{start[1]:02d}")
    future = np.stack([normalize_array(scov[i][sel], ds.norm_stats[n]) for i, n in enumerate(ds.covariate_names)])
    hist_cov = np.stack([ds.covariates[n][:hist_end] for n in ds.covariate_names])
    ens = project(
        gen, hist_cov, ds.index[:hist_end], future, smonths[sel], args.num_traj, args.seed,
        clamp=(float(norm["clamp_lo"]), float(norm["clamp_hi"])),
        index_stats=ds.norm_stats[ds.index_name], scenario=Path(args.scenario).name,
        threads=args.threads, horizon=args.horizon,
    )
    save_ensemble(ens, args.out, ds.index_name)
    print(f"{ens.n_traj} trajectories x {ens.horizon} months; clamp rate {ens.clamp_rate:.4%}")
    return [Path(args.out)], args.seed, [args.params, args.params + ".cfg"]


def cmd_evaluate(args) -> tuple[list[Path], int | None, list]:
    from .data import GridStack, load_dataset, save_grid_stack
    from .evaluation import compute_metrics, summarize, write_summary
    from .projection import load_ensemble

    obs = load_dataset(args.obs)
    ens = load_ensemble(args.gen)
    keyed = {tuple(v): i for i, v in enumerate(obs.months.tolist())}
    try:
        idx = [keyed[tuple(v)] for v in ens.months.tolist()]
    except KeyError as exc:
        raise Failure(f"observed data lacks month {exc.args[0]} of the ensemble") from None
    rasters = compute_metrics(obs.index[idx], ens.data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_summary(summarize(rasters), out)
    rdir = out.parent / f"{out.stem}_rasters"
    rdir.mkdir(exist_ok=True)
    for name, r in rasters.items():
        save_grid_stack(rdir / f"{name}.grd", GridStack(name, np.zeros((1, 2), np.int32), r[None]))
    return [out, rdir], None, []


def cmd_explain(args) -> tuple[list[Path], int, list]:
    from .data import build_contexts
    from .explain import covariate_importance, spatial_importance, write_importance

    gen, _, ds = _load_for_generation(args)
    samples = build_contexts(ds, gen.cfg.lag, "test")
    if len(samples) == 0:
        raise Failure("test split is empty")
    report = covariate_importance(gen, samples, ds.covariate_names, args.permutations, args.seed,
                                  n_traj=args.traj, include_index=not args.no_index_group, per_lag=args.per_lag)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_importance(report, out)
    outputs = [out]
    if args.probe is not None:
        raster = spatial_importance(gen, samples, args.probe, args.seed)
        sp = out.parent / f"{out.stem}_spatial_{args.probe[0]}_{args.probe[1]}.csv"
        np.savetxt(sp, raster, delimiter=",", fmt="%.10g")
        outputs.append(sp)
    return outputs, args.seed, [args.params, args.params + ".cfg"]


def cmd_risk(args) -> tuple[list[Path], int | None, list]:
    from .data import load_dataset
    from .projection import load_ensemble
    from .risk import load_risk_config, loss_distribution, read_communes, write_losses, yearly_series

    cfg = load_risk_config(args.config)
    ens = load_ensemble(args.gen)
    obs = load_dataset(args.data)
    start = ens.months[0, 0] * 12 + ens.months[0, 1]
    hist = obs.months[:, 0] * 12 + obs.months[:, 1] < start
    _, reference = yearly_series(obs.months[hist], obs.index[hist])
    dist = loss_distribution(ens.data, ens.months, reference, read_communes(args.communes), cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_losses(dist, out)
    summary = out.parent / f"{out.stem}_summary.csv"
    with open(summary, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["statistic", "year", "value_eur"])
        for y in dist.years:
            w.writerow(["mean", int(y), repr(float(dist.per_year(y).mean()))])
            w.writerow([f"var_{cfg.var_level}", int(y), repr(dist.quantile(cfg.var_level, int(y)))])
        w.writerow([f"var_{cfg.var_level}_of_max", "all", repr(dist.quantile(cfg.var_level))])
    print(f"VaR {cfg.var_level:.3%} of per-trajectory maximum cost: {dist.quantile(cfg.var_level):.6g} EUR")
    return [out, summary], None, [args.config, args.communes]


def cmd_selftest(args) -> tuple[list[Path], int | None, list]:
    from .selftest import run_selftest

    ok, lines = run_selftest()
    for line in lines:
        print(line)
    if not ok:
        raise Failure("self-test failed")
    return [], 0, []


# -- parser ---------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads (default: all cores)")
    common.add_argument("--manifest", help="manifest path (default: next to the outputs)")

    p = argparse.ArgumentParser(prog="climgan", description="Conditional WGAN climate-index scenario generator")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    data = sub.add_parser("data", help="synthesize or inspect datasets")
    dsub = data.add_subparsers(dest="data_command", required=True)
    s = dsub.add_parser("synth", parents=[common], help="write a synthetic desk dataset")
    s.add_argument("--spec", help="synthetic spec file ([synth] key = value)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_data_synth)
    s = dsub.add_parser("inspect", parents=[common], help="print shapes, statistics and splits as CSV")
    s.add_argument("dir")
    s.set_defaults(func=cmd_data_inspect)

    s = sub.add_parser("train", parents=[common], help="train generator and critic")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--epochs", type=int, help="override the configured epoch count")
    s.add_argument("--resume", help="checkpoint to resume from")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("generate", parents=[common], help="project trajectories under a covariate scenario")
    s.add_argument("--params", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--scenario", required=True)
    s.add_argument("--horizon", type=int, required=True)
    s.add_argument("--num-traj", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--start", type=_parse_month, help="first projected month YYYY-MM (default: after the record)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("evaluate", parents=[common], help="per-pixel metrics of an ensemble")
    s.add_argument("--obs", required=True)
    s.add_argument("--gen", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("explain", parents=[common], help="permutation importance")
    s.add_argument("--params", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--probe", type=_parse_probe)
    s.add_argument("--permutations", type=int, default=5)
    s.add_argument("--traj", type=int, default=2, help="noise replicates per test context")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--no-index-group", action="store_true", help="leave lagged index maps out of the ranking")
    s.add_argument("--per-lag", action="store_true", help="score every lag separately")
    s.set_defaults(func=cmd_explain)

    s = sub.add_parser("risk", parents=[common], help="eligibility and loss distribution")
    s.add_argument("--gen", required=True)
    s.add_argument("--data", required=True, help="observed dataset supplying the historical reference")
    s.add_argument("--communes", required=True)
    s.add_argument("--config", help="risk config ([risk] key = value)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_risk)

    s = sub.add_parser("selftest", parents=[common], help="gradient checks and architecture shapes")
    s.set_defaults(func=cmd_selftest)
    return p


def _primary_out(args) -> Path | None:
    out = getattr(args, "out", None)
    return Path(out) if out else None


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    if args.threads < 1:
        parser.print_usage(sys.stderr)
        print("climgan: error: --threads must be >= 1", file=sys.stderr)
        return 2
    started = time.perf_counter()
    from .data import DataError
    from .risk import RiskError
    from .training import ContractError, TrainingDiverged

    try:
        with threadpool_limits(limits=1):
            outputs, seed, config_files = args.func(args)
    except (Failure, ConfigError, DataError, RiskError, FormatError, ContractError, TrainingDiverged,
            FileNotFoundError, KeyError) as exc:
        print(f"climgan: error: {exc}", file=sys.stderr)
        return 1
    write_manifest(_manifest_path(args, _primary_out(args)), args, seed, outputs, started, config_files)
    return 0


if __name__ == "__main__":
    sys.exit(main())
