"""Flat key/value run configuration.

A config file is a YAML mapping whose keys are dotted names such as
``world.dims`` or ``agent.n_updates``. Nested mappings are not accepted,
so every setting is visible on its own line. Unknown keys are errors.

Keys and defaults (see :data:`DEFAULTS`)::

    world.kind               synthetic | desk | field15 | <path to grid CSV>
    world.dims               [16, 16, 8]      synthetic worlds only
    world.spacing            [1.0, 1.0, 1.0]
    world.blob_count         [3, 6]
    world.blob_amplitude     [0.5, 2.0]
    world.blob_width         [0.08, 0.25]     fraction of each axis extent
    world.budget_steps       50
    world.seed_samples       5
    world.samples_per_edge   4
    world.observation_noise  0.0
    gp.lengthscale_fraction  0.12
    gp.signal_variance       1.0
    gp.noise_variance        1.0e-4
    gp.prior_mean            0.0
    pomcp.rollouts           100              fixed parameters of the naive policy
    pomcp.gamma              0.9
    pomcp.ttest              0.05
    pomcp.depth              8
    pomcp.z_mode             variance | std
    agent.variant            metadata | fixed_length
    agent.objectives         [ei]
    agent.n_workers          8
    agent.n_updates          60
    agent.warmup_episodes    20
    agent.gamma_rl           0.99
    agent.lam                0.95
    agent.clip_ratio         0.2
    agent.epochs             4
    agent.minibatch          64
    agent.lr                 3.0e-4
    agent.entropy_coef       0.0
    agent.hidden             64
    agent.init_log_std       -0.5
    agent.n_jobs             1
    harness.policies         [naive, random]  naive | random | learned_metadata | learned_fixed_length
    harness.checkpoint       null             required by learned policies
    harness.objectives       [ei]
    harness.n_seeds          20
    harness.n_jobs           1
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import yaml

from .agent import ConfigError, PpoHyper, TrainConfig
from .pomcp import SolverParams

DEFAULTS: dict[str, object] = {
    "world.kind": "synthetic",
    "world.dims": [16, 16, 8],
    "world.spacing": [1.0, 1.0, 1.0],
    "world.blob_count": [3, 6],
    "world.blob_amplitude": [0.5, 2.0],
    "world.blob_width": [0.08, 0.25],
    "world.budget_steps": 50,
    "world.seed_samples": 5,
    "world.samples_per_edge": 4,
    "world.observation_noise": 0.0,
    "gp.lengthscale_fraction": 0.12,
    "gp.signal_variance": 1.0,
    "gp.noise_variance": 1e-4,
    "gp.prior_mean": 0.0,
    "pomcp.rollouts": 100,
    "pomcp.gamma": 0.9,
    "pomcp.ttest": 0.05,
    "pomcp.depth": 8,
    "pomcp.z_mode": "variance",
    "agent.variant": "metadata",
    "agent.objectives": ["ei"],
    "agent.n_workers": 8,
    "agent.n_updates": 60,
    "agent.warmup_episodes": 20,
    "agent.gamma_rl": 0.99,
    "agent.lam": 0.95,
    "agent.clip_ratio": 0.2,
    "agent.epochs": 4,
    "agent.minibatch": 64,
    "agent.lr": 3e-4,
    "agent.entropy_coef": 0.0,
    "agent.hidden": 64,
    "agent.init_log_std": -0.5,
    "agent.n_jobs": 1,
    "harness.policies": ["naive", "random"],
    "harness.checkpoint": None,
    "harness.objectives": ["ei"],
    "harness.n_seeds": 20,
    "harness.n_jobs": 1,
}

_INT_KEYS = {k for k, v in DEFAULTS.items() if isinstance(v, int) and not isinstance(v, bool)}
_FLOAT_KEYS = {k for k, v in DEFAULTS.items() if isinstance(v, float)}


def _coerce(key: str, value):
    if key in _INT_KEYS:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if key in _FLOAT_KEYS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(DEFAULTS[key], list):
        if isinstance(value, str):
            value = [value]
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return list(value)
    if value is not None and not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    def with_overrides(self, **dotted) -> "RunConfig":
        merged = dict(self.values)
        for k, v in dotted.items():
            key = k.replace("__", ".")
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = _coerce(key, v)
        return RunConfig(merged)

    def train_config(self, seed: int) -> TrainConfig:
        v = self.values
        try:
            cfg = TrainConfig(
                n_workers=v["agent.n_workers"],
                world_kind=v["world.kind"],
                steps_per_worker=v["world.budget_steps"],
                n_updates=v["agent.n_updates"],
                variant=v["agent.variant"],
                objectives=tuple(v["agent.objectives"]),
                z_mode=v["pomcp.z_mode"],
                dims=tuple(int(d) for d in v["world.dims"]),
                spacing=tuple(float(s) for s in v["world.spacing"]),
                blob_count=tuple(int(c) for c in v["world.blob_count"]),
                blob_amplitude=tuple(float(a) for a in v["world.blob_amplitude"]),
                blob_width=tuple(float(w) for w in v["world.blob_width"]),
                seed_samples=v["world.seed_samples"],
                samples_per_edge=v["world.samples_per_edge"],
                lengthscale_fraction=v["gp.lengthscale_fraction"],
                noise_variance=v["gp.noise_variance"],
                signal_variance=v["gp.signal_variance"],
                prior_mean=v["gp.prior_mean"],
                observation_noise=v["world.observation_noise"],
                warmup_episodes=v["agent.warmup_episodes"],
                gamma_rl=v["agent.gamma_rl"],
                lam=v["agent.lam"],
                ppo=PpoHyper(
                    clip_ratio=v["agent.clip_ratio"], epochs=v["agent.epochs"], minibatch=v["agent.minibatch"],
                    lr=v["agent.lr"], entropy_coef=v["agent.entropy_coef"],
                ),
                hidden=v["agent.hidden"],
                init_log_std=v["agent.init_log_std"],
                seed=int(seed),
                n_jobs=v["agent.n_jobs"],
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        cfg.validate()
        return cfg

    def naive_params(self) -> SolverParams:
        v = self.values
        try:
            return SolverParams(v["pomcp.rollouts"], v["pomcp.gamma"], v["pomcp.ttest"], v["pomcp.depth"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def parse_config(mapping: dict | None) -> RunConfig:
    mapping = mapping or {}
    if not isinstance(mapping, dict):
        raise ConfigError("config must be a mapping of dotted keys")
    values = dict(DEFAULTS)
    for key, value in mapping.items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, dict):
            raise ConfigError(f"{key}: nested mappings are not allowed; use dotted keys")
        values[key] = _coerce(key, value)
    return RunConfig(values)


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig(dict(DEFAULTS))
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(data)


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k}: {yaml.safe_dump(v, default_flow_style=True).strip().removesuffix('...').strip()}\n"
                   for k, v in cfg.values.items())
