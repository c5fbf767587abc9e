"""Time grids and controlled path propagation with cost accumulation.

Two discretisations of ``dx = u dt + dW`` are available:

``"em"``
    Euler–Maruyama. Per step the cost gains
    ``V dt + |u|^2 dt / 2 + u . dW`` (Itô, left endpoint for ``u``).

``"guided"``
    Same drift, but the Gaussian increment is contracted by
    ``r_k = tau_{k+1} / tau_k`` with ``tau = T - t + eps_t`` (the remaining
    bridge time), and the cost gains the exact density-ratio correction
    ``(r_k - 1)|xi|^2 / 2 - (n/2) log r_k``. It is still an exact change of
    measure for any control, it equals EM when ``r_k = 1``, and for V = 0 the
    bare bridge becomes a zero-variance sampler. Plain EM has a variance
    floor of order ``1 / (K eps)`` from the bridge singularity.

The guided contraction only applies when the control has its bridge term
enabled; uncontrolled paths are always plain Brownian motion.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .control import DEFAULT_EPS, ControlFunction
from .exceptions import ConfigurationError
from .model import ModelSystem, check_configuration, circular_displacement, potential_energy, wrap
from .nn import autodiff as ad

BLOCK_SIZE = 1024
SCHEMES = ("guided", "em")
QUADRATURES = ("trapezoid", "left")

_GRID_ALIASES = {
    "uniform": "uniform",
    "linear": "linear",
    "linearly_decreasing": "linear",
    "linearlydecreasing": "linear",
}


@dataclass(frozen=True)
class TimeGrid:
    """Imaginary-time axis [0, T] split into K steps ``dt[k]`` starting at ``t[k]``."""

    T: float
    dt: np.ndarray
    scheme: str

    @property
    def K(self) -> int:
        return len(self.dt)

    @property
    def t(self) -> np.ndarray:
        return self.nodes[:-1]

    @property
    def nodes(self) -> np.ndarray:
        nodes = np.concatenate([[0.0], np.cumsum(self.dt)])
        nodes[-1] = self.T
        return nodes

    @property
    def steps(self) -> list[tuple[float, float]]:
        return list(zip(self.t.tolist(), self.dt.tolist()))


def build_time_grid(T: float, K: int, scheme: str = "linear") -> TimeGrid:
    """Uniform steps ``T/K`` or linearly decreasing steps ``2T(K-k)/(K(K+1))``."""
    if not T > 0:
        raise ConfigurationError(f"total time must be positive, got {T}", "T")
    if int(K) != K or K < 2:
        raise ConfigurationError(f"need at least 2 time steps, got {K}", "K")
    key = _GRID_ALIASES.get(str(scheme).lower())
    if key is None:
        raise ConfigurationError(f"unknown grid scheme {scheme!r}", "scheme")
    K = int(K)
    if key == "uniform":
        dt = np.full(K, T / K)
    else:
        k = np.arange(K)
        dt = 2.0 * T * (K - k) / (K * (K + 1))
    return TimeGrid(float(T), dt, key)


def terminal_penalty(x_end, x_target, eps: float, geometry):
    """-log of a Gaussian of width ``eps`` standing in for the endpoint delta."""
    d = circular_displacement(geometry, x_end, np.asarray(x_target, dtype=np.float64))
    n = geometry.dim
    return ad.sum(d * d, axis=-1) * (0.5 / eps**2) + 0.5 * n * np.log(2.0 * np.pi * eps**2)


def contraction_factors(grid: TimeGrid, control: ControlFunction | None, eps: float, scheme: str) -> np.ndarray:
    """Per-step noise variance factors r_k (all ones unless guided with a bridge)."""
    if scheme not in SCHEMES:
        raise ConfigurationError(f"unknown scheme {scheme!r}", "scheme")
    if control is None or not control.bridge or scheme == "em":
        return np.ones(grid.K)
    tau = grid.T - grid.nodes + control.regularizer(eps)
    return tau[1:] / tau[:-1]


def noise_block(seed: int, block: int, n_paths: int, K: int, dim: int, stream: int = 0) -> np.ndarray:
    """Standard normals ``[n_paths, K, dim]`` for one block of paths.

    Streams are keyed by (seed, stream, block); draws are path-major, so the
    first m paths of a block do not depend on the block's length.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream), int(block)))
    return np.random.Generator(np.random.PCG64(ss)).standard_normal((n_paths, K, dim))


@dataclass
class Trajectories:
    """Raw output of :func:`integrate` for one block (arrays or tape variables)."""

    cost_running: object
    cost_terminal: object
    positions: list = field(default_factory=list)
    increments: list = field(default_factory=list)


def integrate(
    system: ModelSystem,
    grid: TimeGrid,
    x0,
    control: ControlFunction | None,
    xi: np.ndarray,
    *,
    z=None,
    target=None,
    eps: float = DEFAULT_EPS,
    scheme: str = "guided",
    quadrature: str = "trapezoid",
    params=None,
    keep_positions: bool = False,
) -> Trajectories:
    """Propagate a block of paths driven by the standard normals ``xi[b, K, n]``.

    Works on plain arrays or, when ``params`` holds tape variables, records
    every step for backpropagation. ``z`` conditions the control (defaults to
    the control's fixed endpoint); ``target`` is the endpoint scored by the
    terminal penalty (no penalty when None).
    """
    if quadrature not in QUADRATURES:
        raise ConfigurationError(f"unknown quadrature {quadrature!r}", "quadrature")
    geometry = system.geometry
    b, K, n = xi.shape
    if K != grid.K or n != geometry.dim:
        raise ConfigurationError(f"noise shape {xi.shape} does not match grid/geometry", "noise")
    x = np.broadcast_to(np.asarray(x0, dtype=np.float64), (b, n)).copy()
    check_configuration(geometry, x)
    x = wrap(geometry, x)
    if control is not None:
        z = control.resolve_endpoint(z, (b, n))
    r = contraction_factors(grid, control, eps, scheme)
    scale = np.sqrt(r * grid.dt)
    correction = 0.5 * (r - 1.0)[None, :] * np.sum(xi * xi, axis=-1) - 0.5 * n * np.log(r)[None, :]
    t_start = grid.t

    out = Trajectories(0.0, 0.0)
    if keep_positions:
        out.positions.append(x)
    v_prev = potential_energy(system, x)
    cost = 0.0
    for k in range(K):
        dt = grid.dt[k]
        dw = scale[k] * xi[:, k, :]
        if control is not None:
            u = control.drift(x, t_start[k], z, params, eps)
            x_new = wrap(geometry, x + u * dt + dw)
        else:
            u = None
            x_new = wrap(geometry, x + dw)
        v_new = potential_energy(system, x_new)
        if quadrature == "trapezoid":
            cost = cost + (v_prev + v_new) * (0.5 * dt)
        else:
            cost = cost + v_prev * dt
        if u is not None:
            cost = cost + ad.sum(u * u, axis=-1) * (0.5 * dt) + ad.sum(u * dw, axis=-1)
        if r[k] != 1.0:
            cost = cost + correction[:, k]
        out.increments.append(dw)
        if keep_positions:
            out.positions.append(x_new)
        x, v_prev = x_new, v_new
    out.cost_running = cost
    if target is not None:
        tgt = np.broadcast_to(np.asarray(target, dtype=np.float64), (b, n))
        out.cost_terminal = terminal_penalty(x, tgt, eps, geometry)
    else:
        out.cost_terminal = np.zeros(b)
    if not keep_positions:
        out.positions = [x]
    return out


@dataclass
class PathBatch:
    """A batch of discretised paths with per-path cost terms.

    ``noises`` holds the Gaussian increments actually applied,
    ``sqrt(r_k dt_k) * xi``; under plain Euler–Maruyama that is
    ``sqrt(dt_k) * xi``. Paths with any non-finite value are marked invalid.
    """

    positions: np.ndarray | None
    noises: np.ndarray | None
    cost_running: np.ndarray
    cost_terminal: np.ndarray
    valid: np.ndarray
    endpoints: np.ndarray
    walltime: float = 0.0
    statistic: np.ndarray | None = None

    @property
    def cost(self) -> np.ndarray:
        return self.cost_running + self.cost_terminal

    @property
    def n_invalid(self) -> int:
        return int(np.size(self.valid) - np.count_nonzero(self.valid))

    def __len__(self):
        return len(self.cost_running)


def _run_block(system, grid, x0, control, xi, z, target, eps, scheme, quadrature, keep, statistic=None):
    with np.errstate(invalid="ignore", over="ignore"):
        tr = integrate(
            system, grid, x0, control, xi,
            z=z, target=target, eps=eps, scheme=scheme, quadrature=quadrature,
            keep_positions=keep or statistic is not None,
        )
    b = xi.shape[0]
    cr = np.broadcast_to(np.asarray(tr.cost_running, dtype=np.float64), (b,)).copy()
    ct = np.broadcast_to(np.asarray(tr.cost_terminal, dtype=np.float64), (b,)).copy()
    end = tr.positions[-1]
    full = np.stack(tr.positions, axis=1) if (keep or statistic is not None) else None
    stat = statistic(full) if statistic is not None else None
    pos = full if keep else None
    inc = np.stack(tr.increments, axis=1) if keep else None
    valid = np.isfinite(cr) & np.isfinite(ct) & np.all(np.isfinite(end), axis=-1)
    return pos, inc, cr, ct, valid, end, stat


def propagate(
    system: ModelSystem,
    grid: TimeGrid,
    x0,
    control: ControlFunction | None = None,
    batch: int = 1024,
    seed: int = 0,
    *,
    z=None,
    target=None,
    eps: float = DEFAULT_EPS,
    scheme: str = "guided",
    quadrature: str = "trapezoid",
    store_positions: bool = True,
    threads: int | None = None,
    stream: int = 0,
    statistic=None,
) -> PathBatch:
    """Generate ``batch`` paths from ``x0`` (a point or one start per path).

    ``z`` and ``target`` may likewise be one point or one per path. When a
    control is given and ``target`` is None, paths are scored against the
    conditioning endpoint. Results depend only on (seed, stream, batch, K, n),
    never on ``threads``.

    ``statistic`` maps a block's positions ``[b, K+1, n]`` to per-path values
    and is kept in ``PathBatch.statistic``; positions are then freed block by
    block unless ``store_positions`` is set.
    """
    n = system.dim
    if abs(float(np.sum(grid.dt)) - system.T) > 1e-9 * system.T:
        raise ConfigurationError("time grid length does not equal beta", "grid")
    if control is not None and target is None:
        target = control.resolve_endpoint(z, (batch, n))
    x0a = np.asarray(x0, dtype=np.float64)
    per_path = lambda a: a is not None and np.ndim(a) == 2  # noqa: E731

    jobs = []
    for blk, start in enumerate(range(0, batch, BLOCK_SIZE)):
        stop = min(start + BLOCK_SIZE, batch)
        xi = noise_block(seed, blk, stop - start, grid.K, n, stream)
        sl = slice(start, stop)
        jobs.append((
            x0a[sl] if per_path(x0a) else x0a,
            xi,
            np.asarray(z)[sl] if per_path(z) else z,
            np.asarray(target)[sl] if per_path(target) else target,
        ))

    def work(job):
        x0b, xi, zb, tb = job
        return _run_block(
            system, grid, x0b, control, xi, zb, tb, eps, scheme, quadrature, store_positions, statistic
        )

    t0 = time.perf_counter()
    if threads is not None and threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(j) for j in jobs]
    walltime = time.perf_counter() - t0

    cat = lambda i: np.concatenate([r[i] for r in results], axis=0)  # noqa: E731
    return PathBatch(
        positions=cat(0) if store_positions else None,
        noises=cat(1) if store_positions else None,
        cost_running=cat(2),
        cost_terminal=cat(3),
        valid=cat(4),
        endpoints=cat(5),
        walltime=walltime,
        statistic=cat(6) if statistic is not None else None,
    )
