"""Scripted experiments: a manifest runs CLI steps then checks their outputs.

A manifest is a YAML document::

    name: free_particle_kernel
    budget_seconds: 60
    steps:
      - id: est
        command: sample
        config: {model: {kind: free, beta: 1.0}, ...}
    checks:
      - name: kernel
        measured: {step: est, file: estimates.csv, where: {quantity: propagator}, column: K_estimate}
        target: 0.39894
        type: rel            # abs | rel | sigma | decreasing | range
        tolerance: 0.005
        side: both           # both | above | below

``measured`` and ``target`` may be numbers or references into a step's
emitted files (``column`` for CSV, dotted ``key`` for JSON; ``log``,
``scale`` and ``divide_by`` transform the value). ``error`` references the
standard error used by ``sigma`` checks; ``target_error`` adds an
independent error in quadrature. ``side: above`` passes when measured >=
target - tol, ``below`` when measured <= target + tol. ``decreasing`` checks
a list for monotone decay within ``tolerance`` combined errors; ``range``
checks ``low <= measured <= high``. String config values may refer to an
earlier step's output directory as ``${step_id}``.

With a ``cache_dir``, each step runs in a directory keyed by a hash of its
command and resolved config, so manifests sharing a training step reuse it.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .cli import read_csv, run_command, write_json
from .exceptions import ConfigurationError

CHECK_TYPES = ("abs", "rel", "sigma", "decreasing", "range")
SIDES = ("both", "above", "below")
_REF = re.compile(r"\$\{([A-Za-z0-9_\-]+)\}")


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float | None
    target: float | None
    type: str
    tolerance: float
    deviation: float | None = None
    reason: str = ""

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Verdict:
    name: str
    passed: bool
    checks: list[CheckResult] = field(default_factory=list)
    walltime: float = 0.0
    budget_seconds: float | None = None
    error: dict | None = None
    steps: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "steps": self.steps,
            "passed": self.passed,
            "walltime": self.walltime,
            "budget_seconds": self.budget_seconds,
            "error": self.error,
            "checks": [c.as_dict() for c in self.checks],
        }


def load_manifest(path) -> dict:
    path = Path(path)
    doc = yaml.safe_load(path.read_text())
    if not isinstance(doc, Mapping):
        raise ConfigurationError(f"manifest {path} is not a mapping", "manifest")
    doc = dict(doc)
    doc.setdefault("_base", str(path.parent))
    return doc


def _substitute(obj, dirs: Mapping[str, Path]):
    if isinstance(obj, str):
        def repl(m):
            if m.group(1) not in dirs:
                raise ConfigurationError(f"reference to unknown step {m.group(1)!r}", "steps")
            return str(dirs[m.group(1)])
        return _REF.sub(repl, obj)
    if isinstance(obj, Mapping):
        return {k: _substitute(v, dirs) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_substitute(v, dirs) for v in obj]
    return obj


def _lookup(ref, dirs: Mapping[str, Path]):
    """A number, or a value (or list) read from a step's CSV/JSON output."""
    if ref is None or isinstance(ref, (int, float)):
        return ref
    if not isinstance(ref, Mapping):
        raise ConfigurationError(f"cannot interpret value reference {ref!r}", "checks")
    step = ref.get("step")
    if step not in dirs:
        raise ConfigurationError(f"check refers to unknown step {step!r}", "checks")
    path = dirs[step] / ref["file"]
    if path.suffix == ".csv":
        rows = read_csv(path)
        where = {k: str(v) for k, v in (ref.get("where") or {}).items()}
        hits = [r for r in rows if all(r.get(k) == v for k, v in where.items())]
        if len(hits) != 1:
            raise ConfigurationError(f"{path.name}: {len(hits)} rows match {where}", "checks")
        value: Any = float(hits[0][ref["column"]])
    else:
        value = json.loads(path.read_text())
        for part in str(ref["key"]).split("."):
            value = value[int(part)] if isinstance(value, list) else value[part]
    if isinstance(value, list):
        return [_transform(float(v), ref, dirs) for v in value]
    return _transform(float(value), ref, dirs)


def _transform(v: float, ref: Mapping, dirs) -> float:
    if ref.get("log"):
        v = math.log(v) if v > 0 else math.nan
    v *= float(ref.get("scale", 1.0))
    if ref.get("divide_by") is not None:
        v /= _lookup(ref["divide_by"], dirs)
    return v


def evaluate_check(spec: Mapping, dirs: Mapping[str, Path]) -> CheckResult:
    name = spec.get("name", "check")
    kind = spec.get("type", "abs")
    tol = float(spec.get("tolerance", 0.0))
    side = spec.get("side", "both")
    if kind not in CHECK_TYPES:
        raise ConfigurationError(f"unknown check type {kind!r}", f"checks.{name}.type")
    if side not in SIDES:
        raise ConfigurationError(f"unknown check side {side!r}", f"checks.{name}.side")
    measured = _lookup(spec["measured"], dirs)
    if kind == "decreasing":
        return _check_decreasing(name, measured, _lookup(spec.get("error"), dirs), tol)
    if kind == "range":
        lo, hi = float(spec.get("low", -math.inf)), float(spec.get("high", math.inf))
        res = CheckResult(name, False, measured, None, kind, tol)
        res.passed = measured is not None and math.isfinite(measured) and lo <= measured <= hi
        if not res.passed:
            res.reason = f"{measured} outside [{lo:g}, {hi:g}]"
        return res
    target = _lookup(spec["target"], dirs)
    res = CheckResult(name, False, measured, target, kind, tol)
    if measured is None or target is None or not (math.isfinite(measured) and math.isfinite(target)):
        res.reason = "non-finite measurement"
        return res
    diff = measured - target
    if kind == "abs":
        scale = 1.0
    elif kind == "rel":
        scale = abs(target)
    else:
        err = _lookup(spec.get("error"), dirs) or 0.0
        terr = _lookup(spec.get("target_error"), dirs) or 0.0
        scale = math.hypot(err, terr)
    res.deviation = diff / scale if scale > 0 else (0.0 if diff == 0 else math.copysign(math.inf, diff))
    if not tol > 0:
        res.reason = "tolerance violation: tolerance must be positive"
        return res
    if side == "above":
        res.passed = res.deviation >= -tol
    elif side == "below":
        res.passed = res.deviation <= tol
    else:
        res.passed = abs(res.deviation) <= tol
    if not res.passed:
        res.reason = f"tolerance violation: deviation {res.deviation:.4g} ({kind}, {side}) beyond {tol:g}"
    return res


def _check_decreasing(name, values, errors, tol) -> CheckResult:
    res = CheckResult(name, False, None, None, "decreasing", tol)
    if not isinstance(values, list) or len(values) < 2:
        res.reason = "need a list of at least two values"
        return res
    errors = errors if isinstance(errors, list) else [0.0] * len(values)
    worst = -math.inf
    for k in range(1, len(values)):
        rise = values[k] - values[k - 1]
        sig = math.hypot(errors[k], errors[k - 1])
        worst = max(worst, rise / sig if sig > 0 else (math.inf if rise > 0 else -math.inf))
    res.measured = values
    res.deviation = worst
    if not tol > 0:
        res.reason = "tolerance violation: tolerance must be positive"
        return res
    res.passed = worst <= tol
    if not res.passed:
        res.reason = f"tolerance violation: a rise of {worst:.3g} combined sigma exceeds {tol:g}"
    return res


def _step_key(command: str, cfg: Mapping) -> str:
    payload = json.dumps({"command": command, "config": cfg}, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def run_experiment(manifest, out_dir=None, *, threads=None, cache_dir=None, log=None) -> Verdict:
    """Run every step of ``manifest`` (path or mapping) and write ``verdict.json``."""
    if not isinstance(manifest, Mapping):
        manifest = load_manifest(manifest)
    manifest = copy.deepcopy(dict(manifest))
    name = manifest.get("name", "experiment")
    out = Path(out_dir or Path("runs") / name)
    out.mkdir(parents=True, exist_ok=True)
    budget = manifest.get("budget_seconds")
    verdict = Verdict(name, False, budget_seconds=budget)
    dirs: dict[str, Path] = {}
    t0 = time.perf_counter()
    try:
        for step in manifest.get("steps", []):
            sid = step["id"]
            cfg = step.get("config")
            if cfg is None and "config_file" in step:
                cfg = yaml.safe_load((Path(manifest.get("_base", ".")) / step["config_file"]).read_text())
            cfg = _substitute(cfg or {}, dirs)
            if cache_dir is not None:
                dirs[sid] = Path(cache_dir) / f"{step['command']}-{_step_key(step['command'], cfg)}"
            else:
                dirs[sid] = out / sid
            done = dirs[sid] / ".complete"
            if done.exists():
                if log:
                    log(f"[{name}] {sid}: reusing {dirs[sid]}")
                continue
            if log:
                log(f"[{name}] {step['command']} -> {dirs[sid]}")
            run_command(step["command"], cfg, dirs[sid], threads=threads, log=log)
            if cache_dir is not None:
                done.write_text(name)
        verdict.walltime = time.perf_counter() - t0
        verdict.steps = {k: str(v) for k, v in dirs.items()}
        for spec in manifest.get("checks", []):
            verdict.checks.append(evaluate_check(spec, dirs))
        if budget is not None and verdict.walltime > float(budget):
            verdict.checks.append(CheckResult(
                "runtime_budget", False, verdict.walltime, float(budget), "abs", 0.0,
                reason="runtime budget exceeded",
            ))
        verdict.passed = bool(verdict.checks) and all(c.passed for c in verdict.checks)
    except Exception as exc:  # noqa: BLE001 - the verdict records pipeline failures
        verdict.walltime = time.perf_counter() - t0
        verdict.error = {"error": type(exc).__name__, "message": str(exc), "field": getattr(exc, "field", None)}
        verdict.passed = False
    write_json(out / "verdict.json", verdict.as_dict())
    return verdict


def run_suite(directory, out_dir=None, **kw) -> list[Verdict]:
    """Run every ``*.yaml`` manifest in ``directory`` sequentially."""
    out_dir = Path(out_dir or "runs")
    return [run_experiment(p, out_dir / p.stem, **kw) for p in sorted(Path(directory).glob("*.yaml"))]
