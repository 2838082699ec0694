"""End-to-end acceptance criteria, one test per criterion.

Criteria 4, 5 and 10 share one desk experiment per seed (training, grad-norm
probe, projection, permutation importance).  The seeds run in separate
processes; the runtime budget is checked on the per-seed critical path.
"""
import json
import math
import os
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import pytest

from climgan.autodiff import Tape, double_backward_check, gradcheck, no_grad
from climgan.cli import main
from climgan.config import GeneratorConfig, TrainConfig, desk_configs
from climgan.data import SynthSpec, build_contexts, cond_channel_layout, normalize, synthesize
from climgan.evaluation import compute_metrics
from climgan.explain import covariate_importance
from climgan.generator import Generator, RandomSource
from climgan.projection import ensemble_mean, project
from climgan.risk import (
    CostModel, RiskConfig, abnormal_pixels, loss_distribution, rectangular_communes, value_at_risk, yearly_series,
)
from climgan.selftest import GRAD_TOL, DOUBLE_TOL, architecture_report, gp_expression, primitive_cases
from climgan.training import interpolate_grad_norms, train

SEEDS = (0, 1, 2)
N_TRAJ = 100
A, B = 464.4, 4.121e8


# -- shared desk experiment -----------------------------------------------------------------

def _history_column(state, key):
    return np.array([row[key] for row in state.history], dtype=np.float64)


def desk_experiment(seed: int, out_dir: str) -> dict:
    started = time.perf_counter()
    raw, _, _ = synthesize(SynthSpec())
    ds = normalize(raw)
    cfg = desk_configs()
    cfg.train.seed = seed
    state = train(build_contexts(ds, cfg.generator.lag, "train"), cfg, out_dir)
    train_time = time.perf_counter() - started
    gen, critic = state.generator, state.critic

    samples = build_contexts(ds, cfg.generator.lag, "train")
    rng = np.random.default_rng([seed, 77])
    gen.eval()
    with no_grad():
        rs = RandomSource(rng)
        fake = gen(samples.cond, samples.months, rs.vector(len(samples), cfg.generator.noise_dim), rs).data
    with Tape():
        norms, _ = interpolate_grad_norms(critic, samples.target, fake, samples.cond, rng)

    a, b = ds.split_range("test")
    names = ds.covariate_names
    train_idx = ds.index[ds.split_mask("train")]
    ens = project(gen, np.stack([ds.covariates[k][:a] for k in names]), ds.index[:a],
                  np.stack([ds.covariates[k][a:b] for k in names]), ds.months[a:b], N_TRAJ, seed,
                  clamp=(float(train_idx.min()), float(train_idx.max())))
    rho = compute_metrics(ds.index[a:b], ensemble_mean(ens)[None])["rho"]

    report = covariate_importance(gen, build_contexts(ds, cfg.generator.lag, "test"), names, 5, seed)
    gen_loss = _history_column(state, "gen_loss")
    return {
        "seed": seed, "train_time": train_time, "total_time": time.perf_counter() - started,
        "gen_loss": gen_loss, "gp": _history_column(state, "gp"), "norms": norms.data.copy(),
        "rho": rho, "ensemble": ens.data, "observed_test": ds.index[a:b],
        "index_stats": ds.norm_stats[ds.index_name],
        "scores": report.scores, "null_band": report.null_band, "ranking": report.ranking(),
    }


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    workers = max(1, min(len(SEEDS), os.cpu_count() or 1))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(desk_experiment, s, str(root / f"seed{s}")) for s in SEEDS]
        return [f.result() for f in futures]


# -- 1-3: autodiff and configuration ----------------------------------------------------------

def test_c01_autodiff_soundness(acceptance):
    t0 = time.perf_counter()
    worst, failed, n = 0.0, [], 0
    for seed in range(10):
        for name, (fn, inputs) in primitive_cases(seed).items():
            err = gradcheck(fn, inputs, seed=seed)
            n += 1
            worst = max(worst, err)
            if not err < GRAD_TOL:
                failed.append((name, seed, err))
    dbl = max(double_backward_check(*gp_expression(seed)) for seed in range(10))
    elapsed = time.perf_counter() - t0
    ok = not failed and dbl < DOUBLE_TOL and elapsed < 60
    acceptance(1, "autodiff soundness", ok,
               f"{n - len(failed)}/{n} gradchecks < 1e-3 (worst {worst:.1e}), double backward {dbl:.1e}, "
               f"{elapsed:.1f}s")
    assert ok, failed


def test_c02_architecture_fidelity(acceptance):
    rows = architecture_report()
    bad = [r for r in rows if tuple(r[1]) != tuple(r[2])]
    enc = [r[1][0] for r in rows if r[0].startswith("encoder")] + [r[1][0] for r in rows if r[0] == "downsample5"]
    ok = not bad and enc == [48, 24, 12, 6, 3, 1] and dict((r[0], r[1]) for r in rows)["head"] == (37, 44, 1)
    acceptance(2, "architecture fidelity", ok, f"{len(rows) - len(bad)}/{len(rows)} block shapes match; path {enc}")
    assert ok, bad


def test_c03_hyperparameter_fidelity(acceptance):
    t, g = TrainConfig(), GeneratorConfig()
    got = (t.lambda_pen, t.lambda_rec, t.lambda_feat, t.critic_steps, t.batch, g.noise_dim, g.lag, t.lr,
           t.weight_decay, (t.beta1, t.beta2), g.embed_dim)
    ok = got == (10.0, 100.0, 10.0, 5, 64, 32, 8, 1e-5, 0.1, (0.5, 0.999), 5)
    acceptance(3, "hyperparameter fidelity", ok, f"snapshot {got}")
    assert ok


# -- 4, 5, 10: desk experiments ------------------------------------------------------------------

@pytest.mark.slow
def test_c04_wgan_sanity(desk_runs, acceptance):
    drops, in_band, rho_frac = [], [], []
    for r in desk_runs:
        g = r["gen_loss"]
        drops.append((g[10] - g[-1]) / abs(g[10]))
        n = r["norms"]
        in_band.append(float(np.mean((n >= 0.7) & (n <= 1.3))))
        rho_frac.append(float(np.mean(r["rho"] >= 0.6)))
    crit = max(r["total_time"] for r in desk_runs)
    med = lambda v: float(np.median(v))
    ok = med(drops) >= 0.3 and med(in_band) >= 0.8 and med(rho_frac) >= 0.6 and crit < 600
    gp_end = [float(np.nanmean(r["gp"][-10:])) for r in desk_runs]
    acceptance(4, "WGAN sanity", ok,
               f"median gen-loss drop {med(drops):.0%}, grad norms in band {med(in_band):.0%}, "
               f"rho>=0.6 on {med(rho_frac):.0%} of pixels; per-seed wall time {crit:.0f}s "
               f"(final gp {', '.join(f'{v:.3f}' for v in gp_end)})")
    assert ok


def coverage(observed: np.ndarray, generated: np.ndarray, bins: int = 20) -> float:
    """Share of observed mass in buckets (over the observed range) that the generated values also reach."""
    edges = np.linspace(observed.min(), observed.max(), bins + 1)
    obs, _ = np.histogram(observed, edges)
    gen, _ = np.histogram(generated, edges)
    return float(obs[gen > 0].sum() / obs.sum())


@pytest.mark.slow
def test_c05_diversity(desk_runs, acceptance):
    std_frac, cover = [], []
    for r in desk_runs:
        first = r["ensemble"][:, 0]  # all trajectories share the step-1 context
        std_frac.append(float(np.mean(first.std(axis=0) > 0)))
        cover.append(coverage(r["observed_test"], r["ensemble"]))
    ok = np.median(std_frac) >= 0.5 and np.median(cover) >= 0.8
    acceptance(5, "diversity", ok,
               f"std>0 on {np.median(std_frac):.0%} of pixels over {N_TRAJ} draws, "
               f"histogram coverage {np.median(cover):.0%} of observed test mass")
    assert ok


@pytest.mark.slow
def test_c10_explainability(desk_runs, acceptance):
    hits = []
    for r in desk_runs:
        lo, hi = r["null_band"]
        hits.append(r["ranking"][0] == "driver" and lo <= r["scores"]["null"] <= hi)
    detail = "; ".join(
        f"seed {r['seed']}: top {r['ranking'][0]}, null {r['scores']['null']:.1e} in ±{r['null_band'][1]:.1e}"
        for r in desk_runs
    )
    ok = sum(hits) >= 2
    acceptance(10, "explainability ground truth", ok, f"{sum(hits)}/3 seeds ({detail})")
    assert ok


# -- 6-9: oracles ----------------------------------------------------------------------------------

def straight_metrics(y, g):
    n = len(y)
    ybar, gbar = sum(y) / n, sum(g) / n
    sse = sum((a - b) ** 2 for a, b in zip(y, g))
    sst = sum((a - ybar) ** 2 for a in y)
    cov = sum((a - ybar) * (b - gbar) for a, b in zip(y, g))
    sgg = sum((b - gbar) ** 2 for b in g)
    return {
        "mse": sse / n, "rmse": math.sqrt(sse / n), "mae": sum(abs(a - b) for a, b in zip(y, g)) / n,
        "smape": 100 / n * sum(2 * abs(a - b) / (abs(a) + abs(b)) for a, b in zip(y, g)),
        "r2": 1 - sse / sst, "rho": cov / math.sqrt(sst * sgg),
    }


def test_c06_metric_oracle(acceptance):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(20):
        y = rng.uniform(0.05, 1.0, 30)
        g = y + rng.normal(0, 0.2, 30)
        m = compute_metrics(y[:, None, None], g[None, :, None, None])
        for k, v in straight_metrics(list(y), list(g)).items():
            worst = max(worst, abs(m[k].item() - v) / max(1.0, abs(v)))
    perfect = compute_metrics(y[:, None, None], y[None, :, None, None])
    exact = perfect["r2"].item() == 1.0 and all(perfect[k].item() == 0 for k in ("mse", "rmse", "mae", "smape"))
    ok = worst < 1e-6 and exact
    acceptance(6, "metric oracle equivalence", ok, f"max deviation {worst:.1e} over 20 series; perfect case exact {exact}")
    assert ok


def test_c07_projection_recursion(desk_data, acceptance):
    cfg = desk_configs().generator
    gen = Generator(cfg, np.random.default_rng(11))
    names = desk_data.covariate_names
    a, b = desk_data.split_range("test")
    hist_cov = np.stack([desk_data.covariates[k][:a] for k in names])
    future = np.stack([desk_data.covariates[k][a:b] for k in names])
    seen = {}

    def trace(j, k, cond):
        seen[(j, k)] = cond.copy()
    kw = dict(n_traj=6, seed=3, chunk=2)
    ens = project(gen, hist_cov, desk_data.index[:a], future, desk_data.months[a:b], trace=trace, **kw)
    layout = cond_channel_layout(names, cfg.lag)
    checked, wrong = 0, 0
    for (j, k), cond in seen.items():
        for ch, (var, l) in enumerate(layout):
            if var == "__index__":
                expect = ens.data[j, k - l] if k - l >= 0 else desk_data.index[a + k - l]
            else:
                src = names.index(var)
                expect = future[src, k - l] if k - l >= 0 else hist_cov[src, a + k - l]
            checked += 1
            wrong += not np.array_equal(cond[ch], expect)
    threaded = project(gen, hist_cov, desk_data.index[:a], future, desk_data.months[a:b], threads=3, **kw)
    same = threaded.data.tobytes() == ens.data.tobytes()
    ok = wrong == 0 and same and len(seen) == 6 * (b - a)
    acceptance(7, "projection recursion", ok,
               f"{checked - wrong}/{checked} context channels match the recursion; serial == threaded {same}")
    assert ok


def test_c08_cost_model(acceptance):
    m = CostModel(A, B)
    xs = np.unique(np.logspace(0, 9, 400).astype(np.int64)).astype(np.float64)
    xs = np.concatenate([[0.0], xs])
    c = m(xs)
    mono = bool(np.all(np.diff(c) > 0))
    k = A / (5 * B)
    closed = np.array([A * math.exp(-k * x) for x in xs])
    gap_rel = float(np.max(np.abs(m.gap(xs) - closed) / closed))
    consistent = bool(np.all(np.abs((A + B * xs) - c - m.gap(xs)) <= 4 * np.spacing(A + B * xs)))
    compat = CostModel(A, B, compat=True)
    kc = -A / (5 * B)
    bit = all(compat(x) == A + B * x - B * np.exp(-kc * x) for x in (0.0, 1.0, 10.0, 1234.0, 5e6))
    ok = m(0) == 0.0 and mono and gap_rel < 1e-9 and consistent and bit
    acceptance(8, "cost-model properties", ok,
               f"C(0)={float(m(0))}, monotone {mono}, gap rel err {gap_rel:.1e}, printed form bit-exact {bit}")
    assert ok


def brute_force_losses(traj, months, reference, table, rp):
    out = np.zeros((traj.shape[0], len(months) // 12))
    for j in range(traj.shape[0]):
        history = [reference[y] for y in range(reference.shape[0])]
        for yi in range(out.shape[1]):
            ymin = traj[j, 12 * yi:12 * yi + 12].astype(np.float64).min(axis=0)
            srt = np.sort(np.stack(history), axis=0)
            pos = (len(srt) - 1) / rp
            lo = int(pos)
            thr = srt[lo] + (pos - lo) * (srt[min(lo + 1, len(srt) - 1)] - srt[lo])
            x = 0
            for i, px in enumerate(table.pixels):
                share = np.mean([ymin[r, c] <= thr[r, c] for r, c in px.tolist()])
                x += int(table.buildings[i]) if share >= 0.5 else 0
            out[j, yi] = A + B * x - A * math.exp(-A / (5 * B) * x)
            history.append(ymin)
    return out


@pytest.mark.slow
def test_c09_risk_oracle(desk_runs, synth, acceptance):
    raw = synth[0]
    run = desk_runs[0]
    mu, sd = run["index_stats"]
    traj = (run["ensemble"][:50].astype(np.float64) * sd + mu).astype(np.float32)
    a, b = raw.split_range("test")
    _, reference = yearly_series(raw.months[:a], raw.index[:a])
    table = rectangular_communes(16, 16, 4, seed=0)
    cfg = RiskConfig(return_period=10.0)
    dist = loss_distribution(traj, raw.months[a:b], reference, table, cfg)
    oracle = brute_force_losses(traj, raw.months[a:b], reference, table, 10.0)
    dev = float(np.max(np.abs(dist.costs - oracle) / np.maximum(1.0, np.abs(oracle))))

    rng = np.random.default_rng(99)
    rp = 5.0
    ref = rng.random((200, 20, 20))
    hits = np.mean([abnormal_pixels(rng.random((20, 20)), ref, rp) for _ in range(50)], axis=0)
    se = hits.std(ddof=1) / math.sqrt(hits.size)
    freq_ok = abs(hits.mean() - 1 / rp) < 3 * se

    var_ok = True
    for _ in range(20):
        s = rng.exponential(size=int(rng.integers(5, 300)))
        srt = np.sort(s)
        for level in (0.5, 0.9, 0.995, 1.0):
            pos = level * (len(s) - 1)
            lo = int(pos)
            expect = srt[lo] + (pos - lo) * (srt[min(lo + 1, len(s) - 1)] - srt[lo])
            var_ok &= value_at_risk(s, level) == expect
    ok = dev < 1e-6 and freq_ok and var_ok
    acceptance(9, "risk pipeline oracle", ok,
               f"loss deviation {dev:.1e} on M=50; abnormal frequency {hits.mean():.4f} vs {1 / rp} "
               f"(3 SE = {3 * se:.4f}); VaR exact {var_ok}")
    assert ok


# -- 11: reproducibility -----------------------------------------------------------------------------

PIPELINE_CFG = "[DEFAULT]\npreset = desk\n[train]\nepochs = 3\n"


def run_pipeline(root: Path) -> dict:
    """Run every subcommand once; return manifests keyed by subcommand (wall time dropped)."""
    if root.exists():
        shutil.rmtree(root)
    root.mkdir(parents=True)
    (root / "run.cfg").write_text(PIPELINE_CFG)
    (root / "risk.toml").write_text("[risk]\nreturn_period = 10\n")
    d, r, g = str(root / "data"), str(root / "run"), str(root / "gen")
    params = str(root / "run" / "generator.swg")
    calls = {
        "synth": ["data", "synth", "--out", d, "--seed", "4"],
        "train": ["train", "--config", str(root / "run.cfg"), "--data", d, "--out", r, "--quiet"],
        "generate": ["generate", "--params", params, "--data", d, "--scenario", d + "/scenario", "--horizon", "24",
                     "--num-traj", "4", "--seed", "2", "--out", g],
        "generate_hist": ["generate", "--params", params, "--data", d, "--scenario", d, "--start", "2008-01",
                          "--horizon", "24", "--num-traj", "4", "--seed", "2", "--out", str(root / "gen_hist")],
        "evaluate": ["evaluate", "--obs", d, "--gen", str(root / "gen_hist"), "--out", str(root / "eval.csv")],
        "explain": ["explain", "--params", params, "--data", d, "--out", str(root / "imp.csv"),
                    "--permutations", "1", "--traj", "1", "--probe", "2,3"],
        "risk": ["risk", "--gen", g, "--data", d, "--communes", d + "/communes.csv", "--config",
                 str(root / "risk.toml"), "--out", str(root / "losses.csv")],
        "inspect": ["data", "inspect", d, "--manifest", str(root / "inspect.manifest.json")],
    }
    manifests = {}
    for name, argv in calls.items():
        assert main(argv + ["--threads", "1"]) == 0, name
    paths = {
        "synth": root / "data" / "manifest.json", "train": root / "run" / "manifest.json",
        "generate": root / "gen" / "manifest.json", "generate_hist": root / "gen_hist" / "manifest.json",
        "evaluate": root / "eval.manifest.json", "explain": root / "imp.manifest.json",
        "risk": root / "losses.manifest.json", "inspect": root / "inspect.manifest.json",
    }
    for name, p in paths.items():
        m = json.loads(p.read_text())
        m.pop("wall_time_s")
        manifests[name] = m
    return manifests


def test_c11_reproducibility(tmp_path, acceptance):
    first = run_pipeline(tmp_path / "pipe")
    second = run_pipeline(tmp_path / "pipe")
    differing = [k for k in first if first[k] != second[k]]
    n_files = sum(len(m["outputs"]) for m in first.values())
    ok = not differing and n_files > 0
    acceptance(11, "reproducibility", ok,
               f"{len(first) - len(differing)}/{len(first)} subcommand manifests identical across reruns "
               f"({n_files} output files hashed)")
    assert ok, differing
