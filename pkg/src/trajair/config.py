"""Run configuration: defaults, INI file, command-line flags, environment.

Layers are applied in that order, later ones winning. The resolved
configuration is plain data; :func:`config_hash` fingerprints it so every
artifact can be traced back to the exact settings that produced it.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from . import __version__
from .dataset import HorizonConfig
from .geo import FrameConfig
from .model import ModelConfig

ENV_DATA_ROOT = "TRAJAIR_DATA_ROOT"
ENV_SEED = "TRAJAIR_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FrameSettings:
    # reference point and runway axis of the airport; change for other fields
    origin_lat: float = 40.7775
    origin_lon: float = -79.9495
    axis_azimuth_deg: float = 80.0
    altitude_ceiling_ft: float = 6000.0
    radius_m: float = 5000.0
    gap_split_s: int = 60

    def frame(self) -> FrameConfig:
        return FrameConfig(**dataclasses.asdict(self))


@dataclass(frozen=True)
class HorizonSettings:
    t_obs: int = 11
    t_pred: int = 120
    min_agents: int = 1


@dataclass(frozen=True)
class ModelSettings:
    tcn_channels: int = 32
    tcn_kernel: int = 4
    tcn_layers: int = 2
    cnn_channels: int = 16
    cnn_kernel: int = 3
    gat_heads: int = 4
    gat_dim: int = 32
    cvae_latent_dim: int = 64
    mlp_hidden: int = 64


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 1
    batch_size: int = 64
    learning_rate: float = 1e-4
    max_steps: int = 0  # 0: no cap
    window_stride: int = 10
    test_fraction: float = 0.2


@dataclass(frozen=True)
class EvalSettings:
    n_samples: int = 5
    window_stride: int = 20
    batch_size: int = 64


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    data_root: str = "data"


SECTIONS: dict[str, type] = {
    "run": RunSettings,
    "frame": FrameSettings,
    "horizon": HorizonSettings,
    "model": ModelSettings,
    "train": TrainSettings,
    "eval": EvalSettings,
}


@dataclass(frozen=True)
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    frame: FrameSettings = field(default_factory=FrameSettings)
    horizon: HorizonSettings = field(default_factory=HorizonSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)

    @property
    def seed(self) -> int:
        return self.run.seed

    @property
    def data_root(self) -> Path:
        return Path(self.run.data_root)

    def horizon_config(self, stride: int = 1) -> HorizonConfig:
        return HorizonConfig(self.horizon.t_obs, self.horizon.t_pred, self.horizon.min_agents, stride)

    def model_config(self) -> ModelConfig:
        return ModelConfig(**dataclasses.asdict(self.model), t_obs=self.horizon.t_obs, t_pred=self.horizon.t_pred)

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}


def _coerce(cls: type, key: str, raw: Any) -> Any:
    kinds = {f.name: type(f.default) for f in dataclasses.fields(cls)}
    if key not in kinds:
        raise ConfigError(f"unknown setting {cls.__name__}.{key}")
    kind = kinds[key]
    if isinstance(raw, kind) and not isinstance(raw, bool):
        return raw
    try:
        return kind(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"setting {key}={raw!r} is not a valid {kind.__name__}") from None


def _apply(cfg: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    """Apply ``{"section.key": value}`` overrides; ``None`` values are skipped."""
    sections = {name: dataclasses.asdict(getattr(cfg, name)) for name in SECTIONS}
    for dotted, raw in overrides.items():
        if raw is None:
            continue
        section, _, key = dotted.partition(".")
        if section not in SECTIONS or not key:
            raise ConfigError(f"unknown setting {dotted!r}")
        sections[section][key] = _coerce(SECTIONS[section], key, raw)
    try:
        return RunConfig(**{name: SECTIONS[name](**values) for name, values in sections.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def read_ini(path: Path) -> dict[str, str]:
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    out = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, value in parser.items(section):
            out[f"{section}.{key}"] = value
    return out


def env_overrides(environ: Mapping[str, str]) -> dict[str, str]:
    out = {}
    if environ.get(ENV_DATA_ROOT):
        out["run.data_root"] = environ[ENV_DATA_ROOT]
    if environ.get(ENV_SEED):
        out["run.seed"] = environ[ENV_SEED]
    return out


def resolve(
    config_file: Path | None = None,
    flags: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
) -> RunConfig:
    """defaults < config file < flags < environment."""
    cfg = RunConfig()
    if config_file is not None:
        cfg = _apply(cfg, read_ini(Path(config_file)))
    cfg = _apply(cfg, flags or {})
    cfg = _apply(cfg, env_overrides(os.environ if environ is None else environ))
    try:
        cfg.model_config()  # validate cross-section constraints early
        cfg.horizon_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(canonical_json(cfg.to_dict()).encode()).hexdigest()


def stamp(cfg: RunConfig) -> dict:
    """Provenance block embedded in every artifact."""
    return {"config": cfg.to_dict(), "config_hash": config_hash(cfg), "code_version": __version__}


def write_ini(cfg: RunConfig, path: Path) -> None:
    parser = configparser.ConfigParser()
    for name, values in cfg.to_dict().items():
        parser[name] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in values.items()}
    with open(path, "w") as fh:
        parser.write(fh)
