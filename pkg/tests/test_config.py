import dataclasses

import pytest

from climgan.config import (
    ConfigError, CriticConfig, GeneratorConfig, RunConfig, TrainConfig, config_hash, desk_configs,
    dump_config, parse_run_config,
)


def test_default_snapshot():
    t = TrainConfig()
    g = GeneratorConfig()
    snapshot = {
        "lambda_pen": t.lambda_pen, "lambda_rec": t.lambda_rec, "lambda_feat": t.lambda_feat,
        "critic_steps": t.critic_steps, "batch": t.batch, "noise_dim": g.noise_dim, "lag": g.lag,
        "lr": t.lr, "weight_decay": t.weight_decay, "betas": (t.beta1, t.beta2), "embed_dim": g.embed_dim,
    }
    assert snapshot == {
        "lambda_pen": 10.0, "lambda_rec": 100.0, "lambda_feat": 10.0, "critic_steps": 5, "batch": 64,
        "noise_dim": 32, "lag": 8, "lr": 1e-5, "weight_decay": 0.1, "betas": (0.5, 0.999), "embed_dim": 5,
    }


def test_published_architecture_defaults():
    g, c = GeneratorConfig(), CriticConfig()
    assert (g.grid_h, g.grid_w, g.padded) == (37, 44, 48)
    assert g.stage_channels == (64, 128, 256, 256, 256)
    assert g.n_covariates == 11 and g.dropout_blocks == 3 and g.leaky_slope == 0.2
    assert c.base_filters == (32, 64, 128) and c.leaky_slope == 0.2


def test_channel_count():
    g = GeneratorConfig()
    assert g.context_channels == (g.lag + 1) * g.n_covariates + g.lag + g.embed_dim + g.noise_dim == 144


def test_dump_parse_round_trip():
    cfg = desk_configs()
    cfg.train.epochs = 7
    back = parse_run_config(dump_config(cfg))
    assert dataclasses.asdict(back) == dataclasses.asdict(cfg)


def test_preset_and_override():
    cfg = parse_run_config("[DEFAULT]\npreset = desk\n[train]\nepochs = 3\n")
    assert cfg.generator.grid_h == 16 and cfg.train.epochs == 3


@pytest.mark.parametrize("text", [
    "[train]\nbogus = 1\n",
    "[nosuch]\nx = 1\n",
    "[train]\nbatch = many\n",
    "[train]\nschedule = linear\n",
    "[generator]\ngrid_h = 99\n",
    "[DEFAULT]\npreset = huge\n",
])
def test_invalid_configs_raise(text):
    with pytest.raises(ConfigError):
        parse_run_config(text)


def test_hash_is_content_addressed():
    text = dump_config(RunConfig())
    assert config_hash(text) == config_hash(text)
    assert config_hash(text) != config_hash(text + " ")


def test_shipped_config_files():
    from importlib.resources import files

    from climgan.config import load_run_config

    root = files("climgan") / "configs"
    assert dataclasses.asdict(load_run_config(root / "published.cfg")) == dataclasses.asdict(RunConfig())
    assert dataclasses.asdict(load_run_config(root / "desk.cfg")) == dataclasses.asdict(desk_configs())
