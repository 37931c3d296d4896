"""Declarative run configuration: INI file + CLI flag overrides.

Layered resolution: built-in defaults, then the config file, then any
explicit command-line flags.  Unknown keys in a config file are rejected
rather than silently ignored.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigurationError
from .models import canonical_variant
from .preprocessing import DEFAULT_BORDER_FRACTION, DEFAULT_CLIP_LIMIT, DEFAULT_TILES, PROFILES
from .training import TrainConfig


@dataclass
class RunConfig:
    """Merged view of model, training, and preprocessing settings."""

    # [model]
    variant: str = "connected_unets_plusplus"
    input_size: int = 224
    input_channels: int = 1
    unit_order: str = "relu_bn"
    aspp_merge: str = "sum"
    # [train]
    learning_rate: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 300
    val_fraction: float = 0.15
    early_stop_patience: int = 30
    lr_reduce_patience: int = 10
    lr_reduce_factor: float = 0.5
    min_lr: float = 1e-6
    seed: int = 0
    # [preprocess]
    profile: str = "cbis_ddsm"
    border_fraction: float = DEFAULT_BORDER_FRACTION
    clip_limit: float = DEFAULT_CLIP_LIMIT
    tiles: int = DEFAULT_TILES[0]
    target_size: int = 224
    # [evaluate]
    threshold: float = 0.5

    def __post_init__(self):
        self.variant = canonical_variant(self.variant)
        if self.profile not in PROFILES:
            raise ConfigurationError(f"unknown profile {self.profile!r}; choose from {PROFILES}")
        if self.input_size % 16 or self.input_size < 32:
            raise ConfigurationError(
                f"input_size must be a multiple of 16 and >= 32, got {self.input_size}"
            )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            val_fraction=self.val_fraction,
            early_stop_patience=self.early_stop_patience,
            lr_reduce_patience=self.lr_reduce_patience,
            lr_reduce_factor=self.lr_reduce_factor,
            min_lr=self.min_lr,
            seed=self.seed,
            input_size=self.input_size,
        )


_SECTIONS = {
    "model": ("variant", "input_size", "input_channels", "unit_order", "aspp_merge"),
    "train": ("learning_rate", "batch_size", "max_epochs", "val_fraction",
              "early_stop_patience", "lr_reduce_patience", "lr_reduce_factor",
              "min_lr", "seed"),
    "preprocess": ("profile", "border_fraction", "clip_limit", "tiles", "target_size"),
    "evaluate": ("threshold",),
}

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigurationError(f"config key {name}: cannot parse {raw!r}") from exc


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigurationError(f"cannot parse {path}: {exc}") from exc
    values = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigurationError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                raise ConfigurationError(f"{path}: unknown key {key!r} in [{section}]")
            values[key] = _coerce(key, raw)
    return RunConfig(**values)


def save_config(cfg: RunConfig, path) -> None:
    parser = configparser.ConfigParser()
    for section, keys in _SECTIONS.items():
        parser[section] = {k: str(getattr(cfg, k)) for k in keys}
    with open(path, "w") as fh:
        parser.write(fh)


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """New config with non-None override values applied."""
    values = {f.name: getattr(cfg, f.name) for f in fields(RunConfig)}
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in values:
            raise ConfigurationError(f"unknown config override {key!r}")
        values[key] = value
    return RunConfig(**values)
