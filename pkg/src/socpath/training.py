"""Variational training of the control by backpropagation through paths.

Each epoch draws fresh noise (and boundary points), propagates on a coarse
grid while recording a tape, and takes one optimiser step on either the
mean path cost (propagator objective) or the Jensen free-energy bound.
Validation runs on the fine grid without a tape.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .boundary import default_boundary, sample_boundary
from .control import ControlFunction
from .estimators import EstimateReport, free_energies, propagator_both
from .exceptions import ConfigurationError, ConvergenceError
from .model import ModelSystem
from .nn import autodiff as ad
from .nn.checkpoint import checkpoint_id, save_checkpoint
from .nn.optim import Adam
from .sde import build_time_grid, integrate, noise_block

OBJECTIVES = ("propagator", "free_energy")
TRAIN_STREAM = 11
VALID_STREAM = 12


@dataclass
class TrainConfig:
    objective: str = "free_energy"
    x0: list | None = None
    xT: list | None = None
    K_train: int = 64
    K_eval: int = 256
    B_train: int = 128
    M_train: int = 64
    epochs: int = 2000
    lr: float = 1e-3
    lr_schedule: str = "constant"
    lr_min: float = 0.0
    seed: int = 0
    eps: float = 0.05
    grid: str = "linear"
    scheme: str = "guided"
    quadrature: str = "trapezoid"
    validate_every: int = 100
    B_eval: int = 4096
    M_eval: int = 512
    c_P: float = 1.0
    checkpoint_path: str | None = None
    curve_path: str | None = None
    max_bad_epochs: int = 3

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigurationError(f"unknown objective {self.objective!r}", "objective")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigurationError(f"unknown lr schedule {self.lr_schedule!r}", "lr_schedule")
        if self.K_train > self.K_eval:
            raise ConfigurationError("K_train must not exceed K_eval", "K_train")
        if self.objective == "propagator" and (self.x0 is None or self.xT is None):
            raise ConfigurationError("the propagator objective needs x0 and xT", "x0")
        if self.objective == "free_energy" and self.B_train < self.M_train:
            raise ConfigurationError("B_train must be at least M_train", "B_train")
        for name in ("epochs", "B_train", "M_train", "validate_every", "B_eval", "M_eval"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive", name)

    @property
    def paths_per_z(self) -> int:
        return self.B_train // self.M_train

    def step_size(self, epoch: int) -> float:
        if self.lr_schedule == "constant":
            return self.lr
        frac = epoch / max(self.epochs - 1, 1)
        return self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + np.cos(np.pi * frac))


@dataclass
class TrainResult:
    control: ControlFunction
    checkpoint: dict
    curve: list = field(default_factory=list)
    best_loss: float = float("inf")
    skipped_epochs: int = 0

    @property
    def checkpoint_id(self) -> str:
        return checkpoint_id(self.checkpoint)


def _objective_loss(cfg: TrainConfig, costs, log_p=None):
    """Propagator: mean C. Free energy: -log mean_z exp(-mean_b C(z, b) - log P(z))."""
    if cfg.objective == "propagator":
        return ad.mean(costs)
    per_z = ad.mean(ad.reshape(costs, (cfg.M_train, cfg.paths_per_z)), axis=1)
    return ad.neg(ad.logsumexp(ad.neg(per_z) - log_p)) + np.log(cfg.M_train)


def _epoch_loss(system, ctrl, P, cfg, grid, epoch, params):
    """One tape-recorded batch on the coarse grid; returns the scalar loss."""
    n = system.dim
    if cfg.objective == "propagator":
        B = cfg.B_train
        x0 = np.asarray(cfg.x0, dtype=np.float64)
        z = np.broadcast_to(np.asarray(cfg.xT, dtype=np.float64), (B, n))
        log_p = None
    else:
        B = cfg.M_train * cfg.paths_per_z
        zs, log_p = sample_boundary(P, cfg.M_train, cfg.seed, stream=TRAIN_STREAM, block=epoch)
        z = np.repeat(zs, cfg.paths_per_z, axis=0)
        x0 = z
    xi = noise_block(cfg.seed, epoch, B, grid.K, n, stream=TRAIN_STREAM)
    tr = integrate(
        system, grid, x0, ctrl, xi, z=z, target=z, eps=cfg.eps,
        scheme=cfg.scheme, quadrature=cfg.quadrature, params=params,
    )
    costs = tr.cost_running + tr.cost_terminal
    return _objective_loss(cfg, costs, log_p)


def validate(system: ModelSystem, ctrl: ControlFunction, cfg: TrainConfig, *, seed: int | None = None, P=None):
    """Variational and direct estimates on the fine grid with fresh seeds.

    Returns ``(variational, direct)``; ``direct.extra["kl_gap"]`` holds
    bound minus direct (in units of the objective).
    """
    seed = cfg.seed + 1_000_003 if seed is None else seed
    grid = build_time_grid(system.T, cfg.K_eval, cfg.grid)
    kw = dict(scheme=cfg.scheme, quadrature=cfg.quadrature)
    if cfg.objective == "propagator":
        ctrl_z = ControlFunction(
            ctrl.geometry, ctrl.T, ctrl.residual, ctrl.bridge, ctrl.bridge_eps,
            np.asarray(cfg.xT, dtype=np.float64), ctrl.time_feature,
        )
        direct, bound = propagator_both(system, grid, cfg.x0, ctrl_z, cfg.eps, cfg.B_eval, seed, **kw)
        return bound, direct
    P = P if P is not None else default_boundary(system, cfg.c_P)
    per_z = max(cfg.B_eval // cfg.M_eval, 1)
    direct, var = free_energies(system, grid, P, ctrl, cfg.eps, cfg.M_eval, per_z, seed, **kw)
    return var, direct


def _fine_loss(system, ctrl, cfg, P) -> float:
    var, _ = validate(system, ctrl, cfg, seed=cfg.seed + VALID_STREAM, P=P)
    if cfg.objective == "propagator":
        return var.value
    return var.value * system.beta


def _metadata(system, cfg, extra=None):
    meta = {"system": system.describe(), "train": asdict(cfg)}
    if extra:
        meta.update(extra)
    return meta


def train(
    system: ModelSystem,
    ctrl: ControlFunction,
    P=None,
    cfg: TrainConfig | None = None,
    *,
    log=None,
) -> TrainResult:
    """Minimise the configured objective over the residual's parameters.

    The best checkpoint (by fine-grid validation loss) is kept and, when
    ``cfg.checkpoint_path`` is set, written to disk every time it improves.
    A non-finite loss or gradient skips the epoch; ``max_bad_epochs`` in a
    row abort with :class:`ConvergenceError`.
    """
    cfg = cfg or TrainConfig()
    if ctrl.residual is None:
        raise ConfigurationError("training needs a control with a neural residual", "residual")
    if cfg.objective == "free_energy":
        if ctrl.endpoint is not None:
            raise ConfigurationError("the free-energy objective needs a z-conditioned control", "endpoint")
        P = P if P is not None else default_boundary(system, cfg.c_P)
    grid = build_time_grid(system.T, cfg.K_train, cfg.grid)
    net = ctrl.residual
    opt = Adam(cfg.lr)
    curve: list[dict] = []
    best = float("inf")
    best_ckpt = None
    bad = skipped = 0
    t_start = time.perf_counter()

    def checkpoint_now(loss, epoch):
        return ctrl.to_checkpoint(_metadata(system, cfg, {"epoch": epoch, "validation_loss": loss}))

    for epoch in range(cfg.epochs + 1):
        fine = None
        if epoch % cfg.validate_every == 0 or epoch == cfg.epochs:
            fine = _fine_loss(system, ctrl, cfg, P)
            if np.isfinite(fine) and fine < best:
                best = fine
                best_ckpt = checkpoint_now(fine, epoch)
                if cfg.checkpoint_path:
                    save_checkpoint(cfg.checkpoint_path, best_ckpt)
        if epoch == cfg.epochs:
            curve.append({"epoch": epoch, "coarse_loss": None, "fine_loss": fine,
                          "walltime": time.perf_counter() - t_start})
            break
        tape = ad.Tape()
        names = list(net.params)
        pvars = {k: tape.variable(net.params[k]) for k in names}
        with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
            loss = _epoch_loss(system, ctrl, P, cfg, grid, epoch, pvars)
            loss_value = float(ad.value_of(loss))
            grads = None
            if np.isfinite(loss_value):
                grads = dict(zip(names, tape.backward(loss, [pvars[k] for k in names])))
        ok = grads is not None and all(np.all(np.isfinite(g)) for g in grads.values())
        if ok:
            net.params = opt.step(net.params, grads, lr=cfg.step_size(epoch))
            bad = 0
        else:
            bad += 1
            skipped += 1
            if log:
                log(f"epoch {epoch}: non-finite loss or gradient, step skipped")
            if bad >= cfg.max_bad_epochs:
                raise ConvergenceError(f"{bad} consecutive epochs with non-finite loss; aborting")
        curve.append({"epoch": epoch, "coarse_loss": loss_value, "fine_loss": fine,
                      "walltime": time.perf_counter() - t_start})
        if log and fine is not None:
            log(f"epoch {epoch}: coarse {loss_value:.6f} fine {fine:.6f}")

    if cfg.curve_path:
        write_curve(cfg.curve_path, curve)
    if best_ckpt is None:
        raise ConvergenceError("no validation pass produced a finite loss")
    # hand back the best parameters, not the last ones
    best_ctrl = ControlFunction.from_checkpoint(best_ckpt, system)
    ctrl.residual.params = {k: v.copy() for k, v in best_ctrl.residual.params.items()}
    return TrainResult(ctrl, best_ckpt, curve, best, skipped)


def write_curve(path, curve):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "coarse_loss", "fine_loss", "walltime"])
        w.writeheader()
        for row in curve:
            w.writerow({k: ("" if v is None else v) for k, v in row.items()})


def bridge_baseline(system, cfg: TrainConfig, P=None) -> tuple[EstimateReport, EstimateReport]:
    """Validation pair for the bare bridge, the reference every trained control must beat."""
    ctrl = ControlFunction.for_system(system, None)
    return validate(system, ctrl, cfg, P=P)


__all__ = ["TrainConfig", "TrainResult", "train", "validate", "bridge_baseline", "write_curve"]
