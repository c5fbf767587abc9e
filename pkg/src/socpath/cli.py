"""Command-line entry point: train, sample, benchmark, extrapolate, oracle.

Each command reads a YAML config, writes a resolved snapshot plus CSV and
JSON outputs into ``--out``, and exits nonzero with a JSON error document
when anything goes wrong.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
import traceback
from pathlib import Path
from typing import Mapping

import numpy as np

from . import config as cfgmod
from .boundary import default_boundary
from .control import ControlFunction
from .estimators import (
    correlation_function,
    fit_correlation_length,
    free_energies,
    propagator_both,
    running_free_energy,
    sample_ensemble,
)
from .exceptions import ArchitectureError, ConfigurationError, EstimationError
from .model import ModelSystem, RotorChain
from .nn.checkpoint import checkpoint_id, load_checkpoint, save_checkpoint
from .oracle import OracleCache, analytic_kernel, ed_1d, ed_rotor
from .sde import build_time_grid
from .training import TrainConfig, train

COMMANDS = ("train", "sample", "benchmark", "extrapolate", "oracle")


# -- builders ---------------------------------------------------------------


def build_system(model: Mapping) -> ModelSystem:
    kind = model["kind"]
    beta = float(model["beta"])
    if kind == "free":
        return ModelSystem.free(beta, int(model["n"]))
    if kind == "anharmonic":
        return ModelSystem.anharmonic(float(model["lam"]), beta)
    if kind == "coulomb":
        return ModelSystem.coulomb(beta, float(model["r_cut"]))
    if kind == "rotor":
        return ModelSystem.rotor_chain(int(model["N"]), float(model["J"]), beta, model["boundary"])
    raise ConfigurationError(f"unknown model kind {kind!r}", "model.kind")


def _hidden(control: Mapping):
    h = control.get("hidden")
    if h is None:
        return None
    return tuple(h) if isinstance(h, (list, tuple)) else int(h)


def load_control(control: Mapping, system: ModelSystem, endpoint=None):
    """Control from a checkpoint, a fresh residual, or the bare bridge; plus its id."""
    ckpt_path = control.get("checkpoint")
    if ckpt_path:
        ckpt = load_checkpoint(ckpt_path)
        ctrl = ControlFunction.from_checkpoint(ckpt, system)
        if control.get("bridge_eps") is not None:
            ctrl.bridge_eps = float(control["bridge_eps"])
        if endpoint is not None:
            ctrl.endpoint = np.asarray(endpoint, dtype=np.float64).reshape(system.dim)
        return ctrl, checkpoint_id(ckpt)
    residual = control.get("residual", "auto")
    residual = None if residual in (None, "none") else residual
    ctrl = ControlFunction.for_system(
        system, residual, hidden=_hidden(control), seed=int(control.get("seed", 0)),
        bridge_eps=control.get("bridge_eps"), endpoint=endpoint,
    )
    return ctrl, "bridge" if residual is None else "untrained"


def _grid(cfg, system, K=None):
    g = cfg["grid"]
    return build_time_grid(system.T, int(K or g["K"]), g["scheme"])


def _estimator_kw(cfg):
    return dict(scheme=cfg["grid"]["integrator"], quadrature=cfg["grid"]["quadrature"], threads=cfg.get("threads"))


# -- output helpers ---------------------------------------------------------


def write_csv(path: Path, rows: list[dict]):
    path.parent.mkdir(parents=True, exist_ok=True)
    fields: list[str] = []
    for r in rows:
        for k in r:
            if k not in fields:
                fields.append(k)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else v) for k, v in r.items()})


def read_csv(path) -> list[dict]:
    with Path(path).open() as fh:
        return list(csv.DictReader(fh))


def write_json(path: Path, doc: Mapping):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(doc), indent=1, sort_keys=True))


def _jsonable(x):
    if isinstance(x, Mapping):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    return x


def _sidecar(system, cfg, seed, ckpt_id, report=None, **extra):
    m = system.describe()
    doc = {
        "model": m.get("model"),
        "beta": system.beta,
        "lam": m.get("lam"),
        "J": m.get("J"),
        "N": m.get("N"),
        "K": cfg["grid"]["K"],
        "eps": cfg["grid"]["eps"],
        "seed": seed,
        "checkpoint_id": ckpt_id,
    }
    if report is not None:
        doc.update(
            value=report.value, std_error=report.std_error, walltime=report.walltime,
            paths_used=report.paths_used, invalid_paths=report.invalid_paths,
            M=report.settings.get("M"), B=report.settings.get("B"),
        )
    doc.update(extra)
    return doc


def _row(report, seed, ckpt_id, **extra):
    row = report.as_row()
    row.update(seed=seed, checkpoint_id=ckpt_id)
    row.update(extra)
    return row


def _fit_chain_correlation(system, corr_extra) -> dict:
    """Distance-resolved C(d) from (0, j) pairs and an exponential fit of it."""
    N = system.geometry.size
    periodic = system.potential.boundary == "periodic"
    by_d: dict[int, list] = {}
    for (i, j), v, e in zip(corr_extra["pairs"], corr_extra["values"], corr_extra["errors"]):
        if i != 0:
            continue
        d = min(j, N - j) if periodic else j
        by_d.setdefault(d, []).append((v, e))
    ds = sorted(by_d)
    vals = [float(np.mean([v for v, _ in by_d[d]])) for d in ds]
    errs = [float(np.sqrt(np.sum([e**2 for _, e in by_d[d]])) / len(by_d[d])) for d in ds]
    out = {"distances": ds, "C_of_d": vals, "C_of_d_errors": errs,
           "correlation_length": None, "amplitude": None}
    pos = [k for k, d in enumerate(ds) if d > 0]
    if len(pos) >= 2:
        try:
            A, xi = fit_correlation_length([ds[k] for k in pos], [vals[k] for k in pos],
                                           [max(errs[k], 1e-12) for k in pos])
            out.update(correlation_length=xi, amplitude=A)
        except EstimationError:
            pass
    return out


# -- commands ---------------------------------------------------------------


def cmd_train(cfg: dict, out: Path, log=None) -> dict:
    system = build_system(cfg["model"])
    tr = cfg["training"]
    ctrl, _ = load_control(cfg["control"], system)
    if ctrl.residual is None:
        raise ConfigurationError("training needs a neural residual (control.residual)", "control.residual")
    seed = int(cfg["seed"])
    tcfg = TrainConfig(
        objective=tr["objective"], x0=tr["x0"], xT=tr["xT"], K_train=int(tr["K_train"]),
        K_eval=int(cfg["grid"]["K"]), B_train=int(tr["B_train"]), M_train=int(tr["M_train"]),
        epochs=int(tr["epochs"]), lr=float(tr["lr"]), lr_schedule=tr["lr_schedule"],
        lr_min=float(tr["lr_min"]), seed=seed, eps=float(cfg["grid"]["eps"]), grid=cfg["grid"]["scheme"],
        scheme=cfg["grid"]["integrator"], quadrature=cfg["grid"]["quadrature"],
        validate_every=int(tr["validate_every"]), B_eval=int(tr["B_eval"]), M_eval=int(tr["M_eval"]),
        c_P=float(tr["c_P"]), checkpoint_path=str(out / "checkpoint.json"), curve_path=str(out / "curve.csv"),
    )
    if tcfg.objective == "free_energy" and ctrl.endpoint is not None:
        ctrl.endpoint = None
    result = train(system, ctrl, None, tcfg, log=log)
    save_checkpoint(out / "checkpoint.json", result.checkpoint)
    n_val = sum(1 for r in result.curve if r["fine_loss"] is not None)
    summary = _sidecar(
        system, cfg, seed, result.checkpoint_id,
        best_loss=result.best_loss, validation_rows=n_val, skipped_epochs=result.skipped_epochs,
        epochs=tcfg.epochs, architecture=result.checkpoint["architecture"],
    )
    write_json(out / "train.json", summary)
    return summary


def cmd_sample(cfg: dict, out: Path, log=None) -> dict:
    system = build_system(cfg["model"])
    est = cfg["estimator"]
    seed = int(cfg["seed"])
    eps = float(cfg["grid"]["eps"])
    grid = _grid(cfg, system)
    kw = _estimator_kw(cfg)
    kind = est["kind"]
    rows = []
    if kind == "propagator":
        if est["x0"] is None or est["xT"] is None:
            raise ConfigurationError("propagator sampling needs estimator.x0 and estimator.xT", "estimator.x0")
        ctrl, cid = load_control(cfg["control"], system, endpoint=est["xT"])
        direct, bound = propagator_both(system, grid, est["x0"], ctrl, eps, int(est["B"]), seed, **kw)
        rows.append(_row(direct, seed, cid, K_estimate=float(np.exp(direct.value))))
        rows.append(_row(bound, seed, cid))
        main = direct
        extra = {"bound": bound.value, "bound_std_error": bound.std_error}
    elif kind in ("free_energy", "correlation"):
        if kind == "correlation" and not isinstance(system.potential, RotorChain):
            raise ConfigurationError("correlation sampling needs a rotor model", "estimator.kind")
        ctrl, cid = load_control(cfg["control"], system)
        if ctrl.endpoint is not None:
            raise ConfigurationError("ensemble sampling needs a z-conditioned control", "control")
        P = default_boundary(system, float(est["c_P"]))
        M, B = int(est["M"]), int(est["B"])
        n = system.n_particles
        if kind == "free_energy":
            direct, var = free_energies(system, grid, P, ctrl, eps, M, B, seed, **kw)
            reports = [direct, var]
            main, extra = direct, {"variational": var.value, "variational_std_error": var.std_error}
        else:
            corr = correlation_function(system, grid, P, ctrl, eps, M, B, seed, pairs=est["pairs"], **kw)
            direct, var = corr.extra.pop("free_energy"), corr.extra.pop("free_energy_variational")
            reports = [direct, var]
            for (i, j), v, e in zip(corr.extra["pairs"], corr.extra["values"], corr.extra["errors"]):
                rows.append({"quantity": "correlation", "i": i, "j": j, "value": v, "std_error": e,
                             "seed": seed, "checkpoint_id": cid, "walltime": corr.walltime})
            main = corr
            fit = _fit_chain_correlation(system, corr.extra)
            extra = {**fit, "pairs": corr.extra["pairs"], "values": corr.extra["values"],
                     "errors": corr.extra["errors"], "flags": corr.extra["flags"],
                     "variational": var.value}
        for r in reports:
            rows.append(_row(r, seed, cid, per_particle=r.value / n, per_particle_std_error=r.std_error / n))
    else:
        raise ConfigurationError(f"unknown estimator kind {kind!r}", "estimator.kind")
    write_csv(out / "estimates.csv", rows)
    doc = _sidecar(system, cfg, seed, cid, main, kind=kind, **extra)
    write_json(out / "estimates.json", doc)
    return doc


def cmd_benchmark(cfg: dict, out: Path, log=None) -> dict:
    system = build_system(cfg["model"])
    bench = cfg["benchmark"]
    R = int(bench["runs"])
    if R < 2:
        raise ConfigurationError("benchmark needs at least 2 runs for a spread", "benchmark.runs")
    seed = int(cfg["seed"])
    eps = float(cfg["grid"]["eps"])
    grid = _grid(cfg, system)
    kw = _estimator_kw(cfg)
    P = default_boundary(system, float(cfg["estimator"]["c_P"]))
    M, B = int(bench["M"]), int(bench["B"])
    traces, spread = [], []
    summary: dict = {"controls": {}}
    std_curves = {}
    for name in bench["controls"]:
        if name == "bridge":
            ctrl, cid = ControlFunction.for_system(system, None, bridge_eps=cfg["control"]["bridge_eps"]), "bridge"
        elif name == "checkpoint":
            if not cfg["control"]["checkpoint"]:
                raise ConfigurationError("benchmark control 'checkpoint' needs control.checkpoint",
                                         "control.checkpoint")
            ctrl, cid = load_control(cfg["control"], system)
        else:
            raise ConfigurationError(f"unknown benchmark control {name!r}", "benchmark.controls")
        curves, walls = [], []
        for r in range(R):
            run_seed = seed + 7919 * (r + 1)
            ens = sample_ensemble(system, grid, P, ctrl, eps, M, B, run_seed, **kw)
            paths, f_run = running_free_energy(ens, system.beta)
            wall = ens.walltime * paths / paths[-1]
            curves.append(f_run)
            walls.append(wall)
            for p, w, f in zip(paths, wall, f_run):
                traces.append({"control": name, "run": r, "seed": run_seed, "checkpoint_id": cid,
                               "paths": int(p), "walltime": float(w), "F_running": float(f)})
        curves = np.array(curves)
        final = float(np.mean(curves[:, -1]))
        rel_std = np.std(curves, axis=0, ddof=1) / abs(final)
        mean_wall = np.mean(walls, axis=0)
        for p, w, s in zip(paths, mean_wall, rel_std):
            spread.append({"control": name, "checkpoint_id": cid, "seed": seed, "paths": int(p),
                           "walltime": float(w), "std_rel": float(s)})
        std_curves[name] = rel_std
        summary["controls"][name] = {
            "checkpoint_id": cid, "F_mean": final, "F_per_particle": final / system.n_particles,
            "std_rel_final": float(rel_std[-1]), "walltime_per_run": float(np.mean([w[-1] for w in walls])),
        }
    if "bridge" in std_curves and "checkpoint" in std_curves:
        ratio = std_curves["checkpoint"] / std_curves["bridge"]
        late = paths >= int(bench["warmup_paths"])
        summary["std_ratio"] = ratio.tolist()
        summary["std_ratio_paths"] = paths.tolist()
        summary["std_ratio_max_after_warmup"] = float(np.max(ratio[late])) if np.any(late) else None
        summary["std_ratio_median_after_warmup"] = float(np.median(ratio[late])) if np.any(late) else None
    write_csv(out / "traces.csv", traces)
    write_csv(out / "spread.csv", spread)
    doc = _sidecar(system, cfg, seed, None, runs=R, M=M, B=B, **summary)
    write_json(out / "benchmark.json", doc)
    return doc


def cmd_extrapolate(cfg: dict, out: Path, log=None) -> dict:
    system = build_system(cfg["model"])
    ex = cfg["extrapolate"]
    ckpt_path = cfg["control"]["checkpoint"]
    if not ckpt_path:
        raise ConfigurationError("extrapolation needs control.checkpoint", "control.checkpoint")
    ckpt = load_checkpoint(ckpt_path)
    if ckpt["architecture"].get("kind") != "birecurrent":
        raise ArchitectureError("extrapolation needs a size-independent (recurrent) controller")
    if not isinstance(system.potential, RotorChain):
        raise ConfigurationError("extrapolation is defined for rotor chains", "model.kind")
    seed = int(cfg["seed"])
    eps = float(cfg["grid"]["eps"])
    kw = _estimator_kw(cfg)
    n_eval = ex["N_eval"] if isinstance(ex["N_eval"], list) else [ex["N_eval"]]
    n_train = ckpt.get("metadata", {}).get("system", {}).get("N")
    cid = checkpoint_id(ckpt)
    rows = []
    for N in n_eval:
        target = system.with_sites(int(N))
        ctrl = ControlFunction.from_checkpoint(ckpt, target)
        if cfg["control"].get("bridge_eps") is not None:
            ctrl.bridge_eps = float(cfg["control"]["bridge_eps"])
        P = default_boundary(target, float(cfg["estimator"]["c_P"]))
        grid = _grid(cfg, target)
        direct, var = free_energies(target, grid, P, ctrl, eps, int(ex["M"]), int(ex["B"]), seed, **kw)
        rows.append({
            "N_train": n_train, "N_eval": int(N), "seed": seed, "checkpoint_id": cid,
            "direct": direct.value / N, "direct_std_error": direct.std_error / N,
            "variational": var.value / N, "variational_std_error": var.std_error / N,
            "gap": (var.value - direct.value) / N, "walltime": direct.walltime,
        })
    write_csv(out / "extrapolate.csv", rows)
    doc = _sidecar(system, cfg, seed, cid, rows=rows, N_train=n_train)
    write_json(out / "extrapolate.json", doc)
    return doc


def cmd_oracle(cfg: dict, out: Path, log=None) -> dict:
    system = build_system(cfg["model"])
    oc = cfg["oracle"]
    seed = int(cfg["seed"])
    kind = oc["kind"]
    p = system.potential
    if kind == "auto":
        kind = {"AnharmonicOscillator": "ed_1d", "RotorChain": "ed_rotor"}.get(type(p).__name__, "analytic")
    cache = OracleCache(oc["cache"]) if oc["cache"] else None
    key = {"kind": kind, "model": system.describe(), "oracle": {k: oc[k] for k in ("L", "G", "n_states", "m_max")},
           "x": oc["x"], "smoothing": oc["smoothing"]}

    def compute():
        beta = system.beta
        if kind == "ed_1d":
            sol = ed_1d(system, L=float(oc["L"]), G=int(oc["G"]), n_states=int(oc["n_states"]), check=True)
            res = {"free_energy": sol.free_energy(beta), "E0": float(sol.energies[0]),
                   "truncation_bound": sol.truncation_bound(beta)}
            if oc["x"] is not None:
                xs = np.atleast_1d(np.asarray(oc["x"], dtype=np.float64))
                res["x"] = xs.tolist()
                res["diagonal"] = np.atleast_1d(sol.diagonal(xs, beta, float(oc["smoothing"]))).tolist()
            return res
        if kind == "ed_rotor":
            N = system.geometry.size
            sol = ed_rotor(N, p.J, int(oc["m_max"]), p.boundary, beta=beta)
            smooth = float(oc["smoothing"])
            f_smooth = -sol.rotor_log_partition(beta, smooth) / beta
            return {"free_energy": sol.free_energy(beta), "free_energy_per_particle": sol.free_energy(beta) / N,
                    "free_energy_smoothed": f_smooth, "free_energy_smoothed_per_particle": f_smooth / N,
                    "correlations": [sol.correlation(beta, 0, j) for j in range(N)]}
        if kind == "analytic":
            kk = "free" if type(p).__name__ == "FreeParticle" else "harmonic"
            x = oc["x"] if oc["x"] is not None else [0.0] * system.dim
            return {"kernel": analytic_kernel(kk, x, x, system.T), "kind": kk}
        raise ConfigurationError(f"unknown oracle kind {kind!r}", "oracle.kind")

    t0 = time.perf_counter()
    result = cache.get_or_compute(key, compute) if cache else compute()
    wall = time.perf_counter() - t0
    rows = []
    for k, v in result.items():
        if isinstance(v, (int, float)):
            rows.append({"quantity": k, "value": v, "seed": seed, "checkpoint_id": None})
    write_csv(out / "oracle.csv", rows)
    doc = _sidecar(system, cfg, seed, None, oracle=kind, result=result, walltime=wall)
    write_json(out / "oracle.json", doc)
    return doc


HANDLERS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "benchmark": cmd_benchmark,
    "extrapolate": cmd_extrapolate,
    "oracle": cmd_oracle,
}


def run_command(command: str, raw_cfg: Mapping, out, *, seed=None, threads=None, log=None) -> dict:
    """Resolve ``raw_cfg`` for ``command``, write the snapshot and run it."""
    if command not in HANDLERS:
        raise ConfigurationError(f"unknown command {command!r}", "command")
    raw = dict(raw_cfg)
    if seed is not None:
        raw["seed"] = int(seed)
    if threads is not None:
        raw["threads"] = int(threads)
    cfg = cfgmod.resolve(raw, command)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.yaml").write_text(cfgmod.dump(cfg))
    return HANDLERS[command](cfg, out, log=log)


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="socpath", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=None, help="cap worker threads (results unchanged)")
        p.add_argument("--out", default=None, help="output directory (default: output.dir from config)")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    out = None
    try:
        raw = cfgmod.load_config(args.config)
        out_dir = args.out or (raw.get("output") or {}).get("dir") or "runs"
        out = Path(out_dir)
        doc = run_command(
            args.command, raw, out, seed=args.seed, threads=args.threads,
            log=lambda m: print(m, file=sys.stderr),
        )
        print(json.dumps(_jsonable({"status": "ok", "command": args.command, "out": str(out),
                                    "summary": doc}), sort_keys=True, default=str))
        return 0
    except Exception as exc:  # noqa: BLE001 - every failure becomes a JSON error
        err = {
            "status": "error",
            "command": args.command,
            "error": type(exc).__name__,
            "message": str(exc),
            "field": getattr(exc, "field", None),
        }
        if not isinstance(exc, (ConfigurationError, ArchitectureError)):
            err["traceback"] = traceback.format_exc(limit=5)
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        if out is not None:
            try:
                write_json(out / "error.json", err)
            except OSError:
                pass
        return 2


if __name__ == "__main__":
    sys.exit(main())
