"""Layered run configuration with dotted-key overrides.

A run config is a plain nested dict with `model`, `train`, `data`, and
`eval` sections. Defaults come from the dataclass defaults; overrides use
`section.key=value` syntax with YAML-typed values. Unknown keys are
rejected, and the fully resolved document is written into every run
directory.
"""

from __future__ import annotations

import copy
from dataclasses import fields

import yaml

from .model import ModelConfig
from .training import TrainConfig

DATA_DEFAULTS = {
    "features_dir": "",
    "val_subjects": 1,
    "zscore": False,
}

EVAL_DEFAULTS = {
    "stride": 0,        # 0 means the model's L (disjoint windows)
    "protocol": "loso",  # loso | split
    "train_fraction": 0.7,
    "repetitions": 1,
}


def default_run_config() -> dict:
    return {
        "model": {f.name: getattr(ModelConfig(), f.name)
                  for f in fields(ModelConfig)},
        "train": {f.name: getattr(TrainConfig(), f.name)
                  for f in fields(TrainConfig)},
        "data": copy.deepcopy(DATA_DEFAULTS),
        "eval": copy.deepcopy(EVAL_DEFAULTS),
    }


class ConfigError(ValueError):
    pass


def _merge(base: dict, update: dict, path: str = "") -> None:
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be a section")
            _merge(base[key], value, where + ".")
        else:
            base[key] = value


def _parse_scalar(raw: str):
    value = yaml.safe_load(raw)
    if isinstance(value, str):
        # YAML 1.1 reads shorthand scientific notation like 3e-4 as a
        # string; accept it as a float anyway
        try:
            return float(value)
        except ValueError:
            return value
    return value


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    """Apply `section.key=value` overrides; values parse as YAML scalars."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().split(".")
        value = _parse_scalar(raw)
        node = {}
        leaf = node
        for key in keys[:-1]:
            leaf[key] = {}
            leaf = leaf[key]
        leaf[keys[-1]] = value
        _merge(config, node)
    return config


def load_run_config(config_file=None, overrides: list[str] = ()) -> dict:
    config = default_run_config()
    if config_file is not None:
        with open(config_file) as fh:
            document = yaml.safe_load(fh) or {}
        _merge(config, document)
    apply_overrides(config, list(overrides))
    return config


def model_config(config: dict) -> ModelConfig:
    section = dict(config["model"])
    # tuples survive YAML round-trips as lists
    return ModelConfig(**section)


def train_config(config: dict) -> TrainConfig:
    return TrainConfig(**config["train"])
