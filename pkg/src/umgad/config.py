"""Layered run configuration: defaults <- config file <- --set overrides.

Sections and keys mirror the constructor arguments of the config dataclasses;
unknown keys are rejected rather than ignored so typos fail loudly. Every CLI
run prints the fully resolved configuration before doing any work.
"""

from __future__ import annotations

import configparser
from pathlib import Path

from .errors import ConfigError, MissingFile
from .masking import MaskConfig, RwrConfig
from .model import LossWeights, ModelConfig
from .train import TrainConfig

DEFAULTS = {
    "model": {
        "hidden_dim": 32,
        "enc_layers": 1,
        "dec_layers": 1,
        "eta": 2.0,
        "cl_denominator": "paper",
        "attr_aug_target": "original",
    },
    "train": {
        "epochs": 100,
        "lr": 1e-3,
        "weight_decay": 0.01,
        "dropout": 0.1,
        "replan_every": 1,
        "threads": 1,
        "no_mask": False,
        "no_original": False,
        "no_attr_aug": False,
        "no_sub_aug": False,
        "no_dcl": False,
    },
    "loss": {
        "alpha": 0.5,
        "beta": 0.4,
        "lambda": 0.3,
        "mu": 0.3,
        "theta": 0.1,
        "epsilon": 0.5,
    },
    "mask": {
        "mask_ratio": 0.2,
        "repeats": 10,
        "n_neg": 5,
    },
    "rwr": {
        "restart_prob": 0.15,
        "subgraph_size": 8,
        "max_steps": 0,
    },
    "detect": {
        "top_k": 0,
    },
}


def _coerce(section, key, raw):
    default = DEFAULTS[section][key]
    if isinstance(default, bool):
        text = str(raw).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{section}.{key}: expected a boolean, got '{raw}'")
    try:
        if isinstance(default, int):
            return int(str(raw))
        if isinstance(default, float):
            return float(str(raw))
    except ValueError:
        raise ConfigError(
            f"{section}.{key}: expected {type(default).__name__}, "
            f"got '{raw}'") from None
    return str(raw)


def _apply(cfg, section, key, raw):
    if section not in cfg:
        raise ConfigError(f"unknown config section '{section}'")
    if key not in cfg[section]:
        raise ConfigError(f"unknown config key '{section}.{key}'")
    cfg[section][key] = _coerce(section, key, raw)


def resolve_config(config_path=None, overrides=()):
    """Resolved {section: {key: typed value}} dict; raises ConfigError early."""
    cfg = {s: dict(kv) for s, kv in DEFAULTS.items()}
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise MissingFile(str(path))
        parser = configparser.ConfigParser()
        try:
            parser.read(path)
        except configparser.Error as err:
            raise ConfigError(f"bad config file {path}: {err}") from None
        for section in parser.sections():
            for key, raw in parser.items(section):
                _apply(cfg, section, key, raw)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(
                f"--set expects section.key=value, got '{item}'")
        dotted, _, raw = item.partition("=")
        section, _, key = dotted.partition(".")
        _apply(cfg, section.strip(), key.strip(), raw.strip())
    # construct the dataclasses once so range errors surface at resolve time
    build_all(cfg)
    return cfg


def format_resolved(cfg):
    lines = []
    for section in sorted(cfg):
        lines.append(f"[{section}]")
        for key in sorted(cfg[section]):
            value = cfg[section][key]
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key}={value}")
        lines.append("")
    return "\n".join(lines).rstrip() + "\n"


def model_config(cfg):
    return ModelConfig(**cfg["model"])


def train_config(cfg, seed=0):
    return TrainConfig(seed=seed, **cfg["train"])


def loss_weights(cfg):
    kv = dict(cfg["loss"])
    kv["lam"] = kv.pop("lambda")
    return LossWeights(**kv)


def mask_config(cfg):
    return MaskConfig(**cfg["mask"])


def rwr_config(cfg):
    return RwrConfig(**cfg["rwr"])


def build_all(cfg):
    return (model_config(cfg), loss_weights(cfg), mask_config(cfg),
            rwr_config(cfg))
