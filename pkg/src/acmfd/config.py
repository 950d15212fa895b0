"""Run configuration: one JSON document validated against a fixed schema.

Unknown keys anywhere in the document are rejected by name, so typos fail
fast instead of silently falling back to defaults.  The ACMFD_SEED
environment variable overrides the configured seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields

SEED_ENV_VAR = "ACMFD_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_train: int = 200
    n_valid: int = 50
    n_test: int = 50


@dataclass
class ScheduleConfig:
    steps: int = 200
    beta_start: float = 5e-4
    beta_end: float = 0.1


@dataclass
class GpConfig:
    length_scale: float = 1e-3
    jitter: float = 1e-8


@dataclass
class DenoiserArchConfig:
    channels: int = 32
    layers: int = 3
    modes: int = 8
    time_dim: int = 32
    mask_visible: bool = True


@dataclass
class MaskingConfig:
    p: float = 0.5
    per_value_weight: float = 1.0
    per_function_weight: float = 1.0


@dataclass
class OptimConfig:
    lr: float = 1e-3
    batch_size: int = 20
    epochs: int = 2000
    valid_every: int = 50


@dataclass
class PredictConfig:
    samples: int = 8
    alphas: tuple = (0.9, 0.95, 0.99)


@dataclass
class RunConfig:
    system: str = "darcy"
    mesh: tuple = (32, 32)
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    gp: GpConfig = field(default_factory=GpConfig)
    denoiser: DenoiserArchConfig = field(default_factory=DenoiserArchConfig)
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    predict: PredictConfig = field(default_factory=PredictConfig)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["mesh"] = list(self.mesh)
        out["predict"]["alphas"] = list(self.predict.alphas)
        return out


_SECTIONS = {
    "data": DataConfig,
    "schedule": ScheduleConfig,
    "gp": GpConfig,
    "denoiser": DenoiserArchConfig,
    "masking": MaskingConfig,
    "optim": OptimConfig,
    "predict": PredictConfig,
}


def _build_section(cls, payload, path):
    if not isinstance(payload, dict):
        raise ConfigError(f"config section {path!r} must be an object")
    known = {f.name for f in fields(cls)}
    for key in payload:
        if key not in known:
            raise ConfigError(f"unknown config key {path + '.' + key!r}")
    kwargs = dict(payload)
    if cls is PredictConfig and "alphas" in kwargs:
        kwargs["alphas"] = tuple(kwargs["alphas"])
    return cls(**kwargs)


def config_from_dict(payload: dict) -> RunConfig:
    if not isinstance(payload, dict):
        raise ConfigError("config document must be a JSON object")
    top_known = {f.name for f in fields(RunConfig)}
    for key in payload:
        if key not in top_known:
            raise ConfigError(f"unknown config key {key!r}")

    kwargs = {}
    for key, value in payload.items():
        if key in _SECTIONS:
            kwargs[key] = _build_section(_SECTIONS[key], value, key)
        elif key == "mesh":
            kwargs[key] = tuple(int(m) for m in value)
        else:
            kwargs[key] = value
    config = RunConfig(**kwargs)

    if config.system not in ("darcy", "convdiff"):
        raise ConfigError(f"unknown system {config.system!r}")
    if len(config.mesh) != 2:
        raise ConfigError("mesh must have two extents")
    if not 0.0 <= config.masking.p <= 1.0:
        raise ConfigError("masking.p must lie in [0, 1]")

    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            config.seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer") from exc
    return config


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(payload)
