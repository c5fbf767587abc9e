"""JSON checkpoints for controller parameters."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping

import numpy as np

from ..exceptions import ArchitectureError
from .layers import build_controller

FORMAT_VERSION = 1


def to_checkpoint(controller, *, control: Mapping | None = None, metadata: Mapping | None = None) -> dict:
    """Serialisable document: architecture, flat parameters, control settings, metadata."""
    params = {
        name: {"shape": list(arr.shape), "data": [float(v) for v in np.ravel(arr)]}
        for name, arr in controller.params.items()
    }
    return {
        "format_version": FORMAT_VERSION,
        "architecture": controller.architecture(),
        "parameters": params,
        "control": dict(control or {}),
        "metadata": dict(metadata or {}),
    }


def checkpoint_id(ckpt: Mapping) -> str:
    """Short content hash of architecture and parameters."""
    payload = json.dumps({"a": ckpt["architecture"], "p": ckpt["parameters"]}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


def dumps(ckpt: Mapping) -> str:
    return json.dumps(ckpt, sort_keys=True, indent=1)


def save_checkpoint(path, ckpt: Mapping) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(ckpt))
    return path


def load_checkpoint(path) -> dict:
    ckpt = json.loads(Path(path).read_text())
    if ckpt.get("format_version") != FORMAT_VERSION:
        raise ArchitectureError(f"unsupported checkpoint format {ckpt.get('format_version')!r}")
    return ckpt


def controller_from_checkpoint(ckpt: Mapping, expected: Mapping | None = None):
    """Rebuild the controller, validating the architecture before accepting weights."""
    arch = ckpt["architecture"]
    if expected is not None:
        for key, val in expected.items():
            if arch.get(key) != val:
                raise ArchitectureError(f"checkpoint {key}={arch.get(key)!r}, expected {val!r}")
    try:
        controller = build_controller(arch)
    except (KeyError, ValueError) as exc:
        raise ArchitectureError(f"invalid architecture descriptor: {exc}") from exc
    stored = ckpt["parameters"]
    if set(stored) != set(controller.params):
        raise ArchitectureError("parameter names do not match the architecture")
    for name, ref in controller.params.items():
        shape = tuple(stored[name]["shape"])
        if shape != ref.shape:
            raise ArchitectureError(f"parameter {name} has shape {shape}, expected {ref.shape}")
        controller.params[name] = np.asarray(stored[name]["data"], dtype=np.float64).reshape(shape)
    return controller
