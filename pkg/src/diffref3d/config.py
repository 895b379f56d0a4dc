"""Experiment configuration and its flat ``key: value`` file form.

Nested sections are addressed with dotted keys (``diffusion.snr``,
``ham.d``, ``loss.theta_reg``, ``proposals.copies``) so a config file is a
single flat YAML mapping that diffs cleanly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import yaml

from .boxes import ConfigError
from .diffusion import DiffusionConfig
from .losses import LossConfig
from .network import HamConfig
from .scene import ProposalSpec, SceneSpec

ENSEMBLE_MODES = ("none", "mean", "nms")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_scenes: int = 4
    lr: float = 1e-3
    seed: int = 0
    enable_ham: bool = True
    enable_diffusion: bool = True
    enable_tt: bool = True
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    ham: HamConfig = field(default_factory=HamConfig)
    proposals: ProposalSpec = field(default_factory=ProposalSpec)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_scenes < 1:
            raise ConfigError("batch_scenes must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")


@dataclass(frozen=True)
class InferConfig:
    steps: int = 1
    ensemble: str = "mean"
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.ensemble not in ENSEMBLE_MODES:
            raise ConfigError(f"ensemble must be one of {ENSEMBLE_MODES}, got {self.ensemble!r}")


_SECTIONS = {
    "diffusion": DiffusionConfig,
    "loss": LossConfig,
    "ham": HamConfig,
    "proposals": ProposalSpec,
    "scene": SceneSpec,
}


def to_flat(cfg) -> dict:
    flat = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            for k, v in to_flat(value).items():
                flat[f"{f.name}.{k}"] = v
        elif isinstance(value, tuple):
            flat[f.name] = list(value)
        else:
            flat[f.name] = value
    return flat


def _coerce(cls, key: str, value):
    default = getattr(cls(), key)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigError(f"{key}: expected a list of {len(default)} values")
        return tuple(type(d)(v) for d, v in zip(default, value))
    return value


def _build(cls, flat: dict, prefix: str = ""):
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    nested: dict[str, dict] = {}
    for key, value in flat.items():
        head, _, rest = key.partition(".")
        if rest:
            if head not in known or head not in _SECTIONS:
                raise ConfigError(f"unknown config key {prefix + key!r}")
            nested.setdefault(head, {})[rest] = value
        else:
            if key not in known or key in _SECTIONS:
                raise ConfigError(f"unknown config key {prefix + key!r}")
            try:
                kwargs[key] = _coerce(cls, key, value)
            except ConfigError as exc:
                raise ConfigError(f"{prefix}{exc}") from None
    for head, sub in nested.items():
        kwargs[head] = _build(_SECTIONS[head], sub, prefix=f"{head}.")
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{prefix.rstrip('.') or cls.__name__}: {exc}") from None


def train_config_from_flat(flat: dict) -> TrainConfig:
    return _build(TrainConfig, flat)


def load_train_config(path) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a flat key/value mapping")
    return train_config_from_flat(data)


def dump_train_config(cfg: TrainConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(to_flat(cfg), fh, sort_keys=False)
