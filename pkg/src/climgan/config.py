"""Configuration schemas and the key=value config file format.

A config file is INI-style text with optional ``[generator]``, ``[critic]``
and ``[train]`` sections; every key must be a field of the matching
dataclass.  Lists are comma separated.  Unspecified keys keep the defaults,
which are the published hyperparameters; :func:`desk_configs` returns the
small preset used for tests and laptop-scale runs.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import os
from dataclasses import dataclass, field, fields
from typing import Any, get_type_hints


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class GeneratorConfig:
    grid_h: int = 37
    grid_w: int = 44
    padded: int = 48
    stage_channels: tuple[int, ...] = (64, 128, 256, 256, 256)
    lag: int = 8
    noise_dim: int = 32
    embed_dim: int = 5
    n_covariates: int = 11
    n_months: int = 12
    dropout_rate: float = 0.5
    dropout_blocks: int = 3
    leaky_slope: float = 0.2
    scse_reduction: int = 2
    noise_init: float = 0.1
    init_seed: int = 0

    @property
    def n_stages(self) -> int:
        return len(self.stage_channels)

    @property
    def cond_channels(self) -> int:
        """Covariate windows plus lagged index maps (no noise, no embedding)."""
        return (self.lag + 1) * self.n_covariates + self.lag

    @property
    def context_channels(self) -> int:
        return self.cond_channels + self.embed_dim + self.noise_dim

    def validate(self) -> None:
        if self.grid_h > self.padded or self.grid_w > self.padded:
            raise ConfigError(f"grid {self.grid_h}x{self.grid_w} exceeds padded extent {self.padded}")
        if self.lag < 1:
            raise ConfigError("lag must be >= 1")
        if self.n_stages < 2:
            raise ConfigError("generator needs at least 2 stages")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")


@dataclass
class CriticConfig:
    base_filters: tuple[int, ...] = (32, 64, 128)
    base_strides: tuple[int, ...] = (2, 2, 2)
    head_filters: int = 256
    leaky_slope: float = 0.2
    sn_iterations: int = 1
    init_seed: int = 1

    def validate(self) -> None:
        if len(self.base_filters) != len(self.base_strides):
            raise ConfigError("base_filters and base_strides must have equal length")


@dataclass
class TrainConfig:
    lambda_pen: float = 10.0
    lambda_rec: float = 100.0
    lambda_feat: float = 10.0
    critic_steps: int = 5
    batch: int = 64
    epochs: int = 1500
    lr: float = 1e-5
    weight_decay: float = 0.1
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    schedule: str = "cosine"
    augment: bool = True
    translation_ratio: float = 0.125
    cutout_ratio: float = 0.5
    checkpoint_every: int = 0
    seed: int = 0

    def validate(self) -> None:
        if min(self.lambda_pen, self.lambda_rec, self.lambda_feat) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.critic_steps < 1:
            raise ConfigError("critic_steps must be >= 1")
        if self.batch < 1 or self.epochs < 0:
            raise ConfigError("batch must be >= 1 and epochs >= 0")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")


@dataclass
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    critic: CriticConfig = field(default_factory=CriticConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        self.generator.validate()
        self.critic.validate()
        self.train.validate()


def desk_configs() -> RunConfig:
    """16x16 grid, 3 covariates, lag 2, batch 16, 300 epochs."""
    gen = GeneratorConfig(
        grid_h=16, grid_w=16, padded=16, stage_channels=(8, 16, 16), lag=2,
        n_covariates=3, dropout_rate=0.1,
    )
    critic = CriticConfig(base_filters=(8, 16, 16), base_strides=(2, 1, 1), head_filters=16)
    train = TrainConfig(batch=16, epochs=300, lr=2e-3, weight_decay=0.01)
    return RunConfig(gen, critic, train)


# -- key=value text ------------------------------------------------------------

def _convert(raw: str, typ: Any, key: str):
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw.strip()
        if typ == tuple[int, ...]:
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ}") from exc
    raise ConfigError(f"{key}: unsupported field type {typ}")


def _format(value: Any) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def update_from_mapping(obj, values: dict[str, str], section: str) -> None:
    hints = get_type_hints(type(obj))
    names = {f.name for f in fields(obj)}
    for key, raw in values.items():
        if key not in names:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        setattr(obj, key, _convert(raw, hints[key], f"{section}.{key}"))


_SECTIONS = ("generator", "critic", "train")


def parse_run_config(text: str, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    cfg = RunConfig(
        dataclasses.replace(base.generator), dataclasses.replace(base.critic), dataclasses.replace(base.train)
    )
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    preset = parser.defaults().get("preset")
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
    if preset is not None:
        if preset != "desk":
            raise ConfigError(f"unknown preset {preset!r}")
        cfg = desk_configs()
    for section in _SECTIONS:
        if parser.has_section(section):
            values = {k: v for k, v in parser.items(section) if k not in parser.defaults()}
            update_from_mapping(getattr(cfg, section), values, section)
    cfg.validate()
    return cfg


def load_run_config(path: str | os.PathLike) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_run_config(fh.read())


def dump_config(obj, section: str | None = None) -> str:
    """Render a dataclass (or RunConfig) as key=value text."""
    buf = io.StringIO()
    items = [(s, getattr(obj, s)) for s in _SECTIONS] if isinstance(obj, RunConfig) else [(section, obj)]
    for name, sub in items:
        buf.write(f"[{name}]\n")
        for f in fields(sub):
            buf.write(f"{f.name} = {_format(getattr(sub, f.name))}\n")
        buf.write("\n")
    return buf.getvalue()


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def load_generator_config(path: str | os.PathLike) -> GeneratorConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    with open(path, encoding="utf-8") as fh:
        parser.read_string(fh.read())
    if not parser.has_section("generator"):
        raise ConfigError(f"{path}: no [generator] section")
    gen = GeneratorConfig()
    update_from_mapping(gen, dict(parser.items("generator")), "generator")
    gen.validate()
    return gen
