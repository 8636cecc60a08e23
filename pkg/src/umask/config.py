"""Model/training configuration and the plain-text run config format.

Run configs are ``key = value`` lines grouped under ``[section]`` headers::

    [data]
    seed = 0
    n_users = 128
    n_test_users = 32

    [model]
    dims = 3, 32, 8, 8
    d = 32
    ...

    [train]
    epochs = 30
    ...

    [eval]
    seeds = 0, 1, 2
    regimes = short, long, cold
    policies = adaptive, random-fixed

Unknown keys are rejected so typos surface as config errors.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

TASKS = ("short", "long", "cold")


class ConfigError(ValueError):
    pass


def task_index(tau: str) -> int:
    try:
        return TASKS.index(tau)
    except ValueError:
        raise ConfigError(f"unknown task {tau!r}; expected one of {TASKS}") from None


@dataclass(frozen=True)
class ModelConfig:
    dims: tuple = (3, 32, 8, 8)
    d: int = 32
    d_task: int = 32
    enc_hidden: int = 64
    hier_tokens: int = 4
    refine_steps: int = 3
    refine_eta: float = 0.1
    fisher_eps: float = 1e-6
    n_groups: int = 4
    group_temperature: float = 1.0
    alpha_init: float = 0.5
    base_ratio_init: float = 0.35
    cold_epsilon: float = 0.3
    p_floor: float = 1e-8
    profile_dim: int = 32
    model_dim: int = 64
    heads: int = 4
    blocks: int = 4
    patch: tuple = (4, 2, 2)
    diffusion_steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    prediction: str = "x0"

    def __post_init__(self):
        c, t, h, w = self.dims
        pt, ph, pw = self.patch
        if t % pt or h % ph or w % pw:
            raise ConfigError(f"patch {self.patch} does not divide dims {self.dims}")
        if self.model_dim % self.heads:
            raise ConfigError("model_dim must be divisible by heads")
        if self.prediction not in ("x0", "eps"):
            raise ConfigError("prediction must be 'x0' or 'eps'")

    @property
    def n_coords(self) -> int:
        _, t, h, w = self.dims
        return t * h * w

    @property
    def n_tokens(self) -> int:
        _, t, h, w = self.dims
        pt, ph, pw = self.patch
        return (t // pt) * (h // ph) * (w // pw)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    learning_rate: float = 1e-3
    lambda_con: float = 0.1
    seed: int = 0
    precision: int = 32
    optimizer: str = "adam"
    infonce_temperature: float = 0.1
    augment: bool = True

    def __post_init__(self):
        if self.lambda_con < 0:
            raise ConfigError("lambda_con must be nonnegative")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer must be 'adam' or 'sgd'")
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")


@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    n_users: int = 128
    n_test_users: int = 32


@dataclass(frozen=True)
class EvalConfig:
    seeds: tuple = (0,)
    regimes: tuple = TASKS
    policies: tuple = ("adaptive", "random-fixed")
    cutoffs: tuple = (1, 3, 5)
    n_relevant: int = 3


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def _convert(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        if default and isinstance(default[0], int):
            return tuple(int(s) for s in items)
        return tuple(items)
    return raw


def _section(cls, values: dict, name: str):
    base = cls()
    known = {f.name: getattr(base, f.name) for f in fields(cls)}
    updates = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{name}]")
        try:
            updates[key] = _convert(raw, known[key])
        except ValueError as exc:
            raise ConfigError(f"bad value for {name}.{key}: {raw!r}") from exc
    return replace(base, **updates)


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    sections = {"data": DataConfig, "model": ModelConfig, "train": TrainConfig, "eval": EvalConfig}
    for name in parser.sections():
        if name not in sections:
            raise ConfigError(f"unknown section [{name}]")
    parts = {name: _section(cls, dict(parser[name]) if parser.has_section(name) else {}, name)
             for name, cls in sections.items()}
    return RunConfig(**parts)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())


def format_config(cfg: RunConfig) -> str:
    lines = []
    for name in ("data", "model", "train", "eval"):
        lines.append(f"[{name}]")
        section = getattr(cfg, name)
        for f in fields(section):
            v = getattr(section, f.name)
            if isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        lines.append("")
    return "\n".join(lines)
