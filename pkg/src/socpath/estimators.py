"""Statistical estimators built on controlled and uncontrolled path samples.

Every exponential average is taken in the log domain. Two-level estimators
(boundary points z outside, paths inside) report standard errors from a
bootstrap over z blocks, since the per-path spread alone ignores the
variance of the boundary sampling.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .boundary import sample_boundary
from .control import DEFAULT_EPS, ControlFunction
from .exceptions import ConfigurationError, EstimationError
from .model import ModelSystem, RotorChain
from .sde import TimeGrid, propagate

N_BOOTSTRAP = 200


@dataclass
class EstimateReport:
    """One estimate with its error bar and bookkeeping.

    ``value`` is log K for propagators, E[C] for bounds, F for free energies
    (total, not per particle; see ``per_particle``).
    """

    quantity: str
    value: float
    std_error: float
    paths_used: int
    invalid_paths: int = 0
    walltime: float = 0.0
    settings: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def paths_generated(self) -> int:
        return self.paths_used + self.invalid_paths

    def per_particle(self, n: int) -> tuple[float, float]:
        return self.value / n, self.std_error / n

    def as_row(self) -> dict:
        row = {
            "quantity": self.quantity,
            "value": self.value,
            "std_error": self.std_error,
            "paths_used": self.paths_used,
            "invalid_paths": self.invalid_paths,
            "walltime": self.walltime,
        }
        row.update({k: v for k, v in self.extra.items() if np.isscalar(v)})
        return row


def log_mean_exp(a, axis=None):
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[axis] if axis is not None else a.size
    return logsumexp(a, axis=axis) - np.log(n)


def log_mean_exp_error(a) -> float:
    """Delta-method standard error of log(mean(exp(a)))."""
    a = np.asarray(a, dtype=np.float64)
    if a.size < 2:
        return float("nan")
    w = np.exp(a - a.max())
    return float(np.std(w, ddof=1) / np.sqrt(a.size) / np.mean(w))


def _settings(system, grid, eps, scheme, quadrature, seed, **more):
    out = dict(system.describe())
    out.update(K=grid.K, grid=grid.scheme, eps=eps, scheme=scheme, quadrature=quadrature, seed=seed)
    out.update(more)
    return out


def _valid_costs(batch):
    c = batch.cost[batch.valid]
    if c.size == 0:
        raise EstimationError("every sampled path was invalid")
    return c


# -- propagators --------------------------------------------------------------


def propagator_fk(
    system: ModelSystem,
    grid: TimeGrid,
    x0,
    xT,
    eps: float = DEFAULT_EPS,
    B: int = 10_000,
    seed: int = 0,
    *,
    threads: int | None = None,
    quadrature: str = "trapezoid",
) -> EstimateReport:
    """log K(xT, T | x0, 0) from uncontrolled Brownian paths."""
    t0 = time.perf_counter()
    batch = propagate(
        system, grid, x0, None, B, seed, target=xT, eps=eps,
        quadrature=quadrature, store_positions=False, threads=threads,
    )
    a = -_valid_costs(batch)
    return EstimateReport(
        "log_propagator",
        float(log_mean_exp(a)),
        log_mean_exp_error(a),
        a.size,
        batch.n_invalid,
        time.perf_counter() - t0,
        _settings(system, grid, eps, "em", quadrature, seed, B=B, control="none"),
    )


def propagator_samples(
    system: ModelSystem,
    grid: TimeGrid,
    x0,
    ctrl: ControlFunction,
    eps: float = DEFAULT_EPS,
    B: int = 10_000,
    seed: int = 0,
    *,
    xT=None,
    threads: int | None = None,
    scheme: str = "guided",
    quadrature: str = "trapezoid",
):
    """Controlled paths from x0 towards the control's endpoint (or ``xT``)."""
    return propagate(
        system, grid, x0, ctrl, B, seed, z=xT, eps=eps, scheme=scheme,
        quadrature=quadrature, store_positions=False, threads=threads,
    )


def propagator_both(system, grid, x0, ctrl, eps=DEFAULT_EPS, B=10_000, seed=0, **kw):
    """Direct log K and the bound E[C] from one shared set of paths."""
    t0 = time.perf_counter()
    batch = propagator_samples(system, grid, x0, ctrl, eps, B, seed, **kw)
    wall = time.perf_counter() - t0
    c = _valid_costs(batch)
    settings = _settings(
        system, grid, eps, kw.get("scheme", "guided"), kw.get("quadrature", "trapezoid"), seed, B=B,
        control="residual" if ctrl.residual is not None else "bridge",
    )
    direct = EstimateReport(
        "log_propagator", float(log_mean_exp(-c)), log_mean_exp_error(-c), c.size, batch.n_invalid,
        wall, settings, {"cost_std": float(np.std(c, ddof=1))},
    )
    bound = EstimateReport(
        "cost_bound", float(np.mean(c)), float(np.std(c, ddof=1) / np.sqrt(c.size)), c.size,
        batch.n_invalid, wall, settings, {"cost_std": float(np.std(c, ddof=1))},
    )
    direct.extra["kl_gap"] = bound.value + direct.value
    return direct, bound


def propagator_controlled(system, grid, x0, ctrl, eps=DEFAULT_EPS, B=10_000, seed=0, **kw) -> EstimateReport:
    """log K as the log-mean of exp(-C) over controlled paths."""
    return propagator_both(system, grid, x0, ctrl, eps, B, seed, **kw)[0]


def variational_propagator_bound(system, grid, x0, ctrl, eps=DEFAULT_EPS, B=10_000, seed=0, **kw) -> EstimateReport:
    """E[C], an upper bound on -log K; exp(-E[C]) is the induced propagator."""
    return propagator_both(system, grid, x0, ctrl, eps, B, seed, **kw)[1]


# -- free energies ----------------------------------------------------------


@dataclass
class EnsembleSample:
    """Closed paths grouped by boundary point: ``costs[m, b]`` with NaN for invalid paths."""

    z: np.ndarray
    log_p: np.ndarray
    costs: np.ndarray
    statistic: np.ndarray | None
    invalid: int
    walltime: float

    @property
    def M(self) -> int:
        return len(self.z)

    @property
    def B(self) -> int:
        return self.costs.shape[1]

    def log_inner(self) -> np.ndarray:
        """Per-z log of the path mean of exp(-C), over valid paths."""
        a = np.where(np.isfinite(self.costs), -self.costs, -np.inf)
        n = np.sum(np.isfinite(self.costs), axis=1)
        with np.errstate(divide="ignore"):
            return logsumexp(a, axis=1) - np.log(n)

    def mean_cost(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.nanmean(self.costs, axis=1)


def sample_ensemble(
    system: ModelSystem,
    grid: TimeGrid,
    P,
    ctrl: ControlFunction | None,
    eps: float = DEFAULT_EPS,
    M: int = 256,
    B: int = 16,
    seed: int = 0,
    *,
    threads: int | None = None,
    scheme: str = "guided",
    quadrature: str = "trapezoid",
    statistic=None,
) -> EnsembleSample:
    """M boundary points from P, then B closed paths z -> z for each."""
    if B < 1:
        raise ConfigurationError("need at least one path per boundary point", "B")
    t0 = time.perf_counter()
    z, log_p = sample_boundary(P, M, seed)
    zp = np.repeat(z, B, axis=0)
    batch = propagate(
        system, grid, zp, ctrl, M * B, seed, z=zp, target=zp, eps=eps, scheme=scheme,
        quadrature=quadrature, store_positions=False, threads=threads, statistic=statistic,
    )
    costs = np.where(batch.valid, batch.cost, np.nan).reshape(M, B)
    stat = None
    if batch.statistic is not None:
        stat = batch.statistic.reshape((M, B) + batch.statistic.shape[1:])
    if not np.any(np.isfinite(costs)):
        raise EstimationError("every sampled path was invalid")
    return EnsembleSample(z, log_p, costs, stat, batch.n_invalid, time.perf_counter() - t0)


def _bootstrap_lme(terms: np.ndarray, seed: int, n_boot: int = N_BOOTSTRAP) -> float:
    terms = terms[np.isfinite(terms)]
    if terms.size < 2:
        return float("nan")
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(99,)))
    idx = rng.integers(0, terms.size, size=(n_boot, terms.size))
    reps = log_mean_exp(terms[idx], axis=1)
    return float(np.std(reps, ddof=1))


def _direct_terms(ens: EnsembleSample) -> np.ndarray:
    return ens.log_inner() - ens.log_p


def _variational_terms(ens: EnsembleSample) -> np.ndarray:
    return -ens.mean_cost() - ens.log_p


def _free_energy_report(quantity, terms, ens, system, beta, seed, settings) -> EstimateReport:
    finite = terms[np.isfinite(terms)]
    if finite.size == 0:
        raise EstimationError("no boundary point produced a valid path")
    log_z = float(log_mean_exp(finite))
    se_log_z = _bootstrap_lme(terms, seed)
    n_valid = int(np.sum(np.isfinite(ens.costs)))
    return EstimateReport(
        quantity,
        -log_z / beta,
        se_log_z / beta,
        n_valid,
        ens.invalid,
        ens.walltime,
        settings,
        {
            "log_Z": log_z,
            "delta_std_error": log_mean_exp_error(finite) / beta,
            "n_particles": system.n_particles,
            "M": ens.M,
            "B": ens.B,
        },
    )


def free_energies(
    system: ModelSystem,
    grid: TimeGrid,
    P,
    ctrl: ControlFunction | None,
    eps: float = DEFAULT_EPS,
    M: int = 256,
    B: int = 16,
    seed: int = 0,
    **kw,
) -> tuple[EstimateReport, EstimateReport]:
    """Direct F and the variational F_theta from one shared ensemble."""
    ens = sample_ensemble(system, grid, P, ctrl, eps, M, B, seed, **kw)
    settings = _settings(
        system, grid, eps, kw.get("scheme", "guided"), kw.get("quadrature", "trapezoid"), seed,
        M=M, B=B, boundary=P.describe(),
        control="none" if ctrl is None else ("residual" if ctrl.residual is not None else "bridge"),
    )
    direct = _free_energy_report("free_energy", _direct_terms(ens), ens, system, system.beta, seed, settings)
    var = _free_energy_report(
        "free_energy_variational", _variational_terms(ens), ens, system, system.beta, seed, settings
    )
    direct.extra["kl_gap"] = var.value - direct.value
    return direct, var


def free_energy_direct(system, grid, P, ctrl, eps=DEFAULT_EPS, M=256, B=16, seed=0, **kw) -> EstimateReport:
    """F = -(1/beta) log E_{z~P}[E_u exp(-C) / P(z)]."""
    return free_energies(system, grid, P, ctrl, eps, M, B, seed, **kw)[0]


def free_energy_variational(system, grid, P, ctrl, eps=DEFAULT_EPS, M=256, B=16, seed=0, **kw) -> EstimateReport:
    """F_theta = -(1/beta) log E_{z~P}[exp(-E_u C) / P(z)] >= F."""
    return free_energies(system, grid, P, ctrl, eps, M, B, seed, **kw)[1]


def running_free_energy(ens: EnsembleSample, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """Direct F after each boundary point, with the matching path counts."""
    terms = _direct_terms(ens)
    terms = np.where(np.isfinite(terms), terms, -np.inf)
    m = np.arange(1, len(terms) + 1)
    log_z = np.logaddexp.accumulate(terms) - np.log(m)
    return m * ens.B, -log_z / beta


# -- correlation function ---------------------------------------------------


def time_averaged_cosines(grid: TimeGrid, pairs):
    """Statistic giving the trapezoid time average of cos(theta_i - theta_j) per path."""
    pairs = [tuple(p) for p in pairs]
    w = np.zeros(grid.K + 1)
    w[:-1] += 0.5 * grid.dt
    w[1:] += 0.5 * grid.dt
    w /= grid.T
    ii = np.array([p[0] for p in pairs])
    jj = np.array([p[1] for p in pairs])

    def stat(positions):
        c = np.cos(positions[:, :, ii] - positions[:, :, jj])
        return np.einsum("bkp,k->bp", c, w)

    return stat


def correlation_function(
    system: ModelSystem,
    grid: TimeGrid,
    P,
    ctrl: ControlFunction | None,
    eps: float = DEFAULT_EPS,
    M: int = 256,
    B: int = 16,
    seed: int = 0,
    pairs=None,
    **kw,
) -> EstimateReport:
    """Thermal <cos(theta_i - theta_j)>, reweighted by exp(-C)/P(z).

    ``extra`` holds ``pairs``, ``values`` and ``errors``; ``value`` is the
    first requested pair. Errors come from a bootstrap over z blocks. The
    direct and variational free energies of the same ensemble ride along as
    ``extra["free_energy"]`` and ``extra["free_energy_variational"]``.
    """
    if not isinstance(system.potential, RotorChain):
        raise ConfigurationError("correlation functions are defined for rotor chains only", "model")
    N = system.geometry.size
    if pairs is None:
        pairs = [(0, j) for j in range(N)]
    pairs = [(int(i), int(j)) for i, j in pairs]
    for i, j in pairs:
        if not (0 <= i < N and 0 <= j < N):
            raise ConfigurationError(f"site pair {(i, j)} outside a chain of {N}", "pairs")
    ens = sample_ensemble(system, grid, P, ctrl, eps, M, B, seed, statistic=time_averaged_cosines(grid, pairs), **kw)
    logw = np.where(np.isfinite(ens.costs), -ens.costs - ens.log_p[:, None], -np.inf)
    shift = np.max(logw)
    w = np.exp(logw - shift)
    stat = np.nan_to_num(ens.statistic)
    num_z = np.einsum("mb,mbp->mp", w, stat)
    den_z = np.sum(w, axis=1)

    def ratio(idx):
        return num_z[idx].sum(axis=0) / den_z[idx].sum()

    values = ratio(np.arange(ens.M))
    # diagonal pairs are identically one per path
    for k, (i, j) in enumerate(pairs):
        if i == j:
            values[k] = 1.0
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(98,)))
    boots = np.array([ratio(rng.integers(0, ens.M, ens.M)) for _ in range(N_BOOTSTRAP)])
    errors = np.std(boots, axis=0, ddof=1)
    for k, (i, j) in enumerate(pairs):
        if i == j:
            errors[k] = 0.0
    den_rel = np.std(den_z, ddof=1) / np.sqrt(ens.M) / max(np.mean(den_z), 1e-300)
    flags = ["denominator_consistent_with_zero"] if den_rel > 1.0 / 3.0 else []
    settings = _settings(
        system, grid, eps, kw.get("scheme", "guided"), kw.get("quadrature", "trapezoid"), seed,
        M=M, B=B, boundary=P.describe(), time_average="trapezoid_with_endpoints",
    )
    return EstimateReport(
        "correlation",
        float(values[0]),
        float(errors[0]),
        int(np.sum(np.isfinite(ens.costs))),
        ens.invalid,
        ens.walltime,
        settings,
        {
            "pairs": pairs, "values": values.tolist(), "errors": errors.tolist(), "flags": flags,
            "free_energy": _free_energy_report(
                "free_energy", _direct_terms(ens), ens, system, system.beta, seed, settings),
            "free_energy_variational": _free_energy_report(
                "free_energy_variational", _variational_terms(ens), ens, system, system.beta, seed, settings),
        },
    )


def fit_correlation_length(distances, values, errors=None) -> tuple[float, float]:
    """Fit A exp(-d / xi) by weighted least squares on log C; returns (A, xi)."""
    d = np.asarray(distances, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    keep = v > 0
    if np.count_nonzero(keep) < 2:
        raise EstimationError("need at least two positive correlations to fit a length")
    sig = None
    if errors is not None:
        sig = np.asarray(errors, dtype=np.float64)[keep] / v[keep]
        sig = np.where(sig > 0, sig, np.min(sig[sig > 0]) if np.any(sig > 0) else 1.0)
    coef = np.polyfit(d[keep], np.log(v[keep]), 1, w=None if sig is None else 1.0 / sig)
    slope, intercept = coef
    xi = -1.0 / slope if slope < 0 else np.inf
    return float(np.exp(intercept)), float(xi)
