import csv
import json
from pathlib import Path

import numpy as np
import pytest

from climgan.cli import main
from climgan.data import load_dataset
from climgan.projection import load_ensemble

CONFIG = "[DEFAULT]\npreset = desk\n[train]\nepochs = 2\n"


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "run.cfg").write_text(CONFIG)
    data, run, gen = root / "data", root / "run", root / "gen"
    assert main(["data", "synth", "--out", str(data), "--seed", "3"]) == 0
    assert main(["train", "--config", str(root / "run.cfg"), "--data", str(data), "--out", str(run),
                 "--quiet"]) == 0
    assert main(["generate", "--params", str(run / "generator.swg"), "--data", str(data), "--scenario", str(data),
                 "--start", "2008-01", "--horizon", "24", "--num-traj", "3", "--seed", "5", "--out", str(gen),
                 "--threads", "1"]) == 0
    return root


def test_unknown_subcommand_is_usage_error(capsys):
    assert main(["frobnicate"]) == 2
    assert main(["train"]) == 2
    assert main(["selftest", "--threads", "0"]) == 2


def test_selftest_passes(tmp_path, capsys):
    assert main(["selftest", "--manifest", str(tmp_path / "m.json")]) == 0
    m = json.loads((tmp_path / "m.json").read_text())
    assert m["subcommand"] == "selftest"


def test_missing_inputs_fail_cleanly(tmp_path, capsys):
    assert main(["data", "inspect", str(tmp_path / "nothing")]) == 1
    assert "error" in capsys.readouterr().err
    (tmp_path / "bad.cfg").write_text("[train]\nbogus = 1\n")
    assert main(["train", "--config", str(tmp_path / "bad.cfg"), "--data", str(tmp_path), "--out",
                 str(tmp_path / "o")]) == 1


def test_training_outputs(pipeline):
    run = pipeline / "run"
    for name in ("generator.swg", "generator.swg.cfg", "critic.swg", "checkpoint_final.swg", "history.csv",
                 "run.cfg", "manifest.json"):
        assert (run / name).exists(), name
    m = json.loads((run / "manifest.json").read_text())
    assert set(m) == {"subcommand", "config_hash", "seed", "versions", "threads", "outputs", "wall_time_s",
                      "critic_shapes"}
    assert m["critic_shapes"]["base0"] == [8, 8, 8]
    assert m["subcommand"] == "train" and m["seed"] == 0
    assert str(run / "generator.swg") in m["outputs"]
    with open(run / "history.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 2


def test_inspect(pipeline, capsys):
    assert main(["data", "inspect", str(pipeline / "data")]) == 0
    rows = list(csv.reader(capsys.readouterr().out.splitlines()))
    assert rows[0][:2] == ["section", "name"]
    assert ["split", "test"] == rows[-1][:2]


def test_generated_ensemble(pipeline):
    ens = load_ensemble(pipeline / "gen")
    assert ens.data.shape == (3, 24, 16, 16)
    assert ens.months[0].tolist() == [2008, 1]
    assert np.all(np.isfinite(ens.data))


def test_generate_is_thread_invariant(pipeline):
    other = pipeline / "gen4"
    assert main(["generate", "--params", str(pipeline / "run" / "generator.swg"), "--data",
                 str(pipeline / "data"), "--scenario", str(pipeline / "data"), "--start", "2008-01",
                 "--horizon", "24", "--num-traj", "3", "--seed", "5", "--out", str(other), "--threads", "4"]) == 0
    a = json.loads((pipeline / "gen" / "manifest.json").read_text())
    b = json.loads((other / "manifest.json").read_text())
    assert sorted(a["outputs"].values()) == sorted(b["outputs"].values())


def test_generate_rejects_long_horizon(pipeline, capsys):
    code = main(["generate", "--params", str(pipeline / "run" / "generator.swg"), "--data",
                 str(pipeline / "data"), "--scenario", str(pipeline / "data"), "--start", "2008-01",
                 "--horizon", "25", "--num-traj", "1", "--out", str(pipeline / "x")])
    assert code == 1
    assert "exceeds" in capsys.readouterr().err


def test_evaluate(pipeline):
    out = pipeline / "eval.csv"
    assert main(["evaluate", "--obs", str(pipeline / "data"), "--gen", str(pipeline / "gen"), "--out", str(out)]) == 0
    with open(out) as fh:
        rows = {r["metric"]: r for r in csv.DictReader(fh)}
    assert set(rows) == {"mse", "rmse", "mae", "smape", "r2", "rho"}
    assert (pipeline / "eval_rasters" / "rho.grd").exists()
    assert (pipeline / "eval.manifest.json").exists()


def test_explain(pipeline):
    out = pipeline / "imp.csv"
    assert main(["explain", "--params", str(pipeline / "run" / "generator.swg"), "--data", str(pipeline / "data"),
                 "--out", str(out), "--permutations", "1", "--traj", "1", "--probe", "3,4"]) == 0
    with open(out) as fh:
        groups = {r["group"] for r in csv.DictReader(fh)}
    assert groups == {"driver", "aux", "null", "index_lags"}
    raster = np.loadtxt(pipeline / "imp_spatial_3_4.csv", delimiter=",")
    assert raster.shape == (16, 16) and raster[3, 4] == pytest.approx(1.0)


def test_risk(pipeline):
    (pipeline / "risk.toml").write_text("[risk]\nreturn_period = 10\n")
    out = pipeline / "losses.csv"
    assert main(["risk", "--gen", str(pipeline / "gen"), "--data", str(pipeline / "data"), "--communes",
                 str(pipeline / "data" / "communes.csv"), "--config", str(pipeline / "risk.toml"),
                 "--out", str(out)]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 * 2
    assert all(float(r["cost_eur"]) >= 0 for r in rows)
    assert (pipeline / "losses_summary.csv").exists()


def test_synth_dataset_loads(pipeline):
    ds = load_dataset(pipeline / "data")
    assert ds.covariate_names == ["driver", "aux", "null"]
    assert Path(pipeline / "data" / "scenario" / "truth_swi.grd").exists()
