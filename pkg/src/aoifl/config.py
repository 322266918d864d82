"""Run configuration files.

A run config is a TOML file with these tables (every key optional)::

    [policy]      n, k, m
    [simulate]    policies, rounds, burn_in, seed, init
    [train]       task, model, hidden, policies, seeds, rounds, local_epochs,
                  batch_size, lr0, lr_decay, target, init
    [partition]   kind, alpha
    [synthetic]   d, classes, samples, test_samples, separation, noise
    [mnist]       data_dir
    [output]      dir

Command-line flags override file values.  The resolved configuration is
written back as ``config.json`` next to the outputs of every run.
"""

from __future__ import annotations

import copy
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = ["DEFAULTS", "ConfigError", "load_run_config", "merge"]

DEFAULTS = {
    "policy": {"n": 100, "k": 15, "m": 10},
    "simulate": {
        "policies": ["uniform", "markov"],
        "rounds": 1_000_000,
        "burn_in": None,
        "seed": 0,
        "init": "random_phase",
    },
    "train": {
        "task": "synthetic",
        "model": "logistic",
        "hidden": 64,
        "policies": ["uniform", "markov"],
        "seeds": [0, 1, 2, 3, 4],
        "rounds": 200,
        "local_epochs": 5,
        "batch_size": 50,
        "lr0": 0.1,
        "lr_decay": 0.998,
        "target": 0.8,
        "init": "all_zero",
    },
    "partition": {"kind": "dirichlet", "alpha": 0.6},
    "synthetic": {
        "d": 20,
        "classes": 10,
        "samples": 5000,
        "test_samples": 2000,
        "separation": 0.6,
        "noise": 0.15,
    },
    "mnist": {"data_dir": None},
    "output": {"dir": "runs"},
}


class ConfigError(ValueError):
    pass


def merge(base: dict, override: dict, where: str = "") -> dict:
    """Recursive merge that rejects keys absent from ``base``."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{where}.{key}" if where else key
        if key not in base:
            raise ConfigError(f"unknown config key '{path}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"'{path}' must be a table")
            out[key] = merge(base[key], value, path)
        else:
            out[key] = value
    return out


def load_run_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults <- file <- overrides.  Missing files raise ``FileNotFoundError``;
    TOML syntax errors raise :class:`ConfigError` with the line and column."""
    config = copy.deepcopy(DEFAULTS)
    if path is not None:
        path = Path(path)
        raw = path.read_bytes()
        try:
            parsed = tomllib.loads(raw.decode("utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        config = merge(config, parsed)
    if overrides:
        config = merge(config, overrides)
    return config
