"""Run configuration: YAML blocks with strict keys and defaults.

Every block has a fixed key set; an unknown key anywhere is an error that
names its dotted path. ``resolve`` fills defaults so the snapshot written next
to each run's outputs reproduces it on its own.
"""

from __future__ import annotations

import copy
from pathlib import Path
from typing import Any, Mapping

import yaml

from .exceptions import ConfigurationError

REQUIRED = object()

SCHEMA: dict[str, dict[str, Any]] = {
    "model": {
        "kind": REQUIRED,  # free | anharmonic | coulomb | rotor
        "beta": REQUIRED,
        "lam": 0.0,
        "r_cut": 1e-3,
        "n": 1,
        "N": 3,
        "J": 1.0,
        "boundary": "open",
    },
    "grid": {
        "K": 256,
        "scheme": "linear",
        "eps": 0.05,
        "integrator": "guided",
        "quadrature": "trapezoid",
    },
    "control": {
        "residual": "auto",  # auto | mlp | birecurrent | none
        "hidden": None,
        "bridge_eps": None,
        "checkpoint": None,
        "seed": 0,
    },
    "training": {
        "objective": "free_energy",
        "x0": None,
        "xT": None,
        "K_train": 64,
        "epochs": 2000,
        "lr": 1e-3,
        "lr_schedule": "constant",
        "lr_min": 0.0,
        "B_train": 128,
        "M_train": 64,
        "validate_every": 100,
        "B_eval": 4096,
        "M_eval": 512,
        "c_P": 1.0,
    },
    "estimator": {
        "kind": "propagator",  # propagator | free_energy | correlation
        "x0": None,
        "xT": None,
        "B": 10_000,
        "M": 256,
        "c_P": 1.0,
        "pairs": None,
    },
    "benchmark": {
        "runs": 20,
        "controls": ["bridge", "checkpoint"],
        "warmup_paths": 1000,
        "M": 256,
        "B": 4,
    },
    "extrapolate": {
        "N_eval": REQUIRED,
        "M": 256,
        "B": 4,
    },
    "oracle": {
        "kind": "auto",  # auto | ed_1d | ed_rotor | analytic
        "L": 10.0,
        "G": 2000,
        "n_states": 200,
        "m_max": 8,
        "x": None,
        "smoothing": 0.0,
        "cache": None,
    },
    "output": {
        "dir": "runs",
        "prefix": "run",
    },
}

TOP_LEVEL = {"seed": 0, "threads": None}

COMMAND_BLOCKS = {
    "train": ("model", "grid", "control", "training"),
    "sample": ("model", "grid", "control", "estimator"),
    "benchmark": ("model", "grid", "control", "estimator", "benchmark"),
    "extrapolate": ("model", "grid", "control", "estimator", "extrapolate"),
    "oracle": ("model", "grid", "oracle"),
}


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} does not exist", "config")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config is not valid YAML: {exc}", "config") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise ConfigurationError("config must be a mapping of blocks", "config")
    return dict(raw)


def resolve(raw: Mapping, command: str | None = None) -> dict:
    """Validate keys, fill defaults and return a fresh resolved mapping."""
    allowed_blocks = set(SCHEMA) | set(TOP_LEVEL)
    for key in raw:
        if key not in allowed_blocks:
            raise ConfigurationError(f"unknown config key {key!r}", key)
    needed = COMMAND_BLOCKS.get(command, tuple(SCHEMA)) if command else tuple(SCHEMA)
    out: dict[str, Any] = {k: raw.get(k, v) for k, v in TOP_LEVEL.items()}
    for block, spec in SCHEMA.items():
        given = raw.get(block)
        if given is None:
            given = {}
        if not isinstance(given, Mapping):
            raise ConfigurationError(f"block {block!r} must be a mapping", block)
        for key in given:
            if key not in spec:
                raise ConfigurationError(f"unknown config key {block}.{key}", f"{block}.{key}")
        if block not in needed and block not in raw:
            continue
        resolved = {}
        for key, default in spec.items():
            if key in given:
                resolved[key] = copy.deepcopy(given[key])
            elif default is REQUIRED:
                raise ConfigurationError(f"missing required field {block}.{key}", f"{block}.{key}")
            else:
                resolved[key] = copy.deepcopy(default)
        out[block] = resolved
    return out


def dump(resolved: Mapping) -> str:
    return yaml.safe_dump(dict(resolved), sort_keys=True)
