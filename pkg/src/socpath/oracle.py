"""Sampler-independent ground truth: exact diagonalisation and closed forms.

Nothing here touches the path sampler; only the potential definitions from
:mod:`socpath.model` are shared.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
from scipy import linalg, sparse
from scipy.interpolate import CubicSpline
from scipy.special import logsumexp

from .exceptions import ConfigurationError, ConvergenceError
from .model import AnharmonicOscillator, ModelSystem, RotorChain, potential_energy


@dataclass
class SpectralSolution:
    """Eigenpairs with the metadata of the basis they live in.

    For grid solutions ``wavefunctions[n, i]`` is psi_n at grid point i with
    ``sum_i psi_n psi_m h = delta_nm``. Rotor solutions store one eigenvector
    block per conserved total momentum in ``blocks``.
    """

    energies: np.ndarray
    wavefunctions: np.ndarray | None = None
    basis: dict = field(default_factory=dict)
    blocks: list = field(default_factory=list)

    def log_partition(self, beta: float) -> float:
        return float(logsumexp(-beta * self.energies))

    def free_energy(self, beta: float) -> float:
        return -self.log_partition(beta) / beta

    def truncation_bound(self, beta: float) -> float:
        """Boltzmann weight of the highest retained level relative to the ground state."""
        return float(np.exp(-beta * (self.energies[-1] - self.energies[0])))

    def gram_error(self) -> float:
        if self.wavefunctions is not None:
            h = self.basis["h"]
            gram = self.wavefunctions @ self.wavefunctions.T * h
            return float(np.max(np.abs(gram - np.eye(len(gram)))))
        err = 0.0
        for blk in self.blocks:
            v = blk["vectors"]
            err = max(err, float(np.max(np.abs(v.T @ v - np.eye(v.shape[1])))))
        return err

    # -- grid solutions -----------------------------------------------------

    def diagonal_on_grid(self, beta: float, smoothing: float = 0.0) -> np.ndarray:
        """rho_beta(x, x) at the grid points.

        ``smoothing > 0`` returns the ket-side Gaussian average
        ``int rho(y, x) N(y - x; smoothing^2) dy``.
        """
        psi = self.wavefunctions
        w = np.exp(-beta * (self.energies - self.energies[0]))
        if smoothing > 0:
            h = self.basis["h"]
            half = int(np.ceil(8 * smoothing / h))
            offs = np.arange(-half, half + 1) * h
            kern = np.exp(-0.5 * (offs / smoothing) ** 2) / np.sqrt(2 * np.pi * smoothing**2) * h
            other = np.array([np.convolve(p, kern, mode="same") for p in psi])
        else:
            other = psi
        return np.exp(-beta * self.energies[0]) * np.einsum("n,ni,ni->i", w, psi, other)

    def diagonal(self, x, beta: float, smoothing: float = 0.0):
        """rho_beta(x, x) interpolated off-grid with a cubic spline."""
        grid = self.basis["x"]
        spline = CubicSpline(grid, self.diagonal_on_grid(beta, smoothing))
        return spline(np.asarray(x, dtype=np.float64))

    # -- rotor solutions ----------------------------------------------------

    def rotor_log_partition(self, beta: float, smoothing: float = 0.0) -> float:
        """log Tr(exp(-beta H) exp(-smoothing^2 sum m^2 / 2))."""
        terms = []
        for blk in self.blocks:
            d = np.exp(-0.5 * smoothing**2 * blk["m2"])
            diag = np.einsum("i,in,in->n", d, blk["vectors"], blk["vectors"])
            terms.append(-beta * blk["energies"] + np.log(diag))
        return float(logsumexp(np.concatenate(terms)))

    def correlation(self, beta: float, i: int, j: int) -> float:
        """Thermal <cos(theta_i - theta_j)> from the spectrum."""
        if i == j:
            return 1.0
        num, logs = [], []
        for blk in self.blocks:
            op = _cos_operator(blk["states"], blk["index"], i, j)
            v = blk["vectors"]
            expect = np.einsum("in,in->n", v, op @ v)
            num.append(expect)
            logs.append(-beta * blk["energies"])
        logs = np.concatenate(logs)
        w = np.exp(logs - logs.max())
        return float(np.sum(w * np.concatenate(num)) / np.sum(w))


def _fd_second_derivative(order: int) -> np.ndarray:
    """Central-difference weights for f'' with the given accuracy order."""
    if order < 2 or order % 2:
        raise ConfigurationError("finite-difference order must be even and >= 2", "order")
    half = order // 2
    offsets = np.arange(-half, half + 1)
    A = np.vander(offsets, increasing=True).T.astype(float)
    rhs = np.zeros(len(offsets))
    rhs[2] = 2.0
    return np.linalg.solve(A, rhs)


def _potential_callable(potential) -> Callable[[np.ndarray], np.ndarray]:
    if callable(potential):
        return potential
    if isinstance(potential, ModelSystem):
        system = potential
    elif isinstance(potential, AnharmonicOscillator):
        system = ModelSystem.anharmonic(potential.lam, 1.0)
    else:
        raise ConfigurationError("ed_1d needs a 1D oscillator-family potential", "potential")
    if system.dim != 1:
        raise ConfigurationError("ed_1d works in one dimension", "potential")
    return lambda x: potential_energy(system, x[:, None])


def _ed_1d_once(V, L, G, n_states, order):
    h = 2.0 * L / (G + 1)
    x = -L + h * np.arange(1, G + 1)
    coeffs = _fd_second_derivative(order)
    half = order // 2
    band = np.zeros((half + 1, G))
    for k in range(half + 1):
        band[half - k, :] = -0.5 * coeffs[half + k] / h**2
    band[half, :] += V(x)
    n_states = min(n_states, G)
    energies, vecs = linalg.eig_banded(band, lower=False, select="i", select_range=(0, n_states - 1))
    # fix signs so the largest component is positive; irrelevant for densities
    vecs = vecs * np.sign(vecs[np.argmax(np.abs(vecs), axis=0), np.arange(vecs.shape[1])])
    return SpectralSolution(
        energies=energies,
        wavefunctions=(vecs / np.sqrt(h)).T,
        basis={"kind": "grid", "L": L, "G": G, "h": h, "x": x, "order": order},
    )


def ed_1d(
    potential,
    L: float = 10.0,
    G: int = 2000,
    n_states: int = 200,
    *,
    order: int = 8,
    check: bool = False,
    n_check: int = 10,
    tol: float = 1e-6,
) -> SpectralSolution:
    """Finite-difference diagonalisation on a Dirichlet box [-L, L].

    The kinetic term uses a central stencil of accuracy ``order`` (8 by
    default; 2 gives the textbook three-point Laplacian). With ``check`` the
    lowest ``n_check`` levels are recomputed with G doubled and with L
    doubled at fixed spacing; a change above ``tol`` raises.
    """
    V = _potential_callable(potential)
    sol = _ed_1d_once(V, L, G, n_states, order)
    if check:
        n_check = min(n_check, len(sol.energies))
        fine = _ed_1d_once(V, L, 2 * G, n_check, order)
        wide = _ed_1d_once(V, 2.0 * L, 2 * (G + 1) - 1, n_check, order)
        for other, what in ((fine, "G"), (wide, "L")):
            diff = np.max(np.abs(other.energies[:n_check] - sol.energies[:n_check]))
            if diff > tol:
                raise ConvergenceError(f"spectrum changed by {diff:.2e} when enlarging {what}")
        sol.basis["convergence"] = {"tol": tol, "n_check": n_check}
    return sol


def _rotor_blocks(N: int, m_max: int):
    ms = range(-m_max, m_max + 1)
    by_total: dict[int, list] = {}
    for state in itertools.product(ms, repeat=N):
        by_total.setdefault(sum(state), []).append(state)
    return by_total


def _bond_list(N: int, boundary: str):
    bonds = [(i, i + 1) for i in range(N - 1)]
    if boundary == "periodic":
        bonds.append((N - 1, 0))
    return bonds


def _cos_operator(states: np.ndarray, index: Mapping, i: int, j: int):
    """cos(theta_i - theta_j) = (S + S^T)/2 with S: m_i += 1, m_j -= 1."""
    rows, cols = [], []
    for col, st in enumerate(states):
        nxt = list(st)
        nxt[i] += 1
        nxt[j] -= 1
        row = index.get(tuple(nxt))
        if row is not None:
            rows += [row, col]
            cols += [col, row]
    n = len(states)
    return sparse.csr_matrix((np.full(len(rows), 0.5), (rows, cols)), shape=(n, n))


def _ed_rotor_once(N, J, m_max, boundary):
    bonds = _bond_list(N, boundary)
    blocks = []
    for total, states in sorted(_rotor_blocks(N, m_max).items()):
        arr = np.array(states, dtype=np.int64)
        index = {s: k for k, s in enumerate(states)}
        n = len(states)
        H = np.diag(0.5 * np.sum(arr**2, axis=1).astype(float))
        if J != 0.0:
            for i, j in bonds:
                op = _cos_operator(arr, index, i, j)
                H -= J * op.toarray()
        energies, vectors = np.linalg.eigh(H)
        blocks.append({
            "total": total,
            "states": arr,
            "index": index,
            "m2": np.sum(arr**2, axis=1).astype(float),
            "energies": energies,
            "vectors": vectors,
        })
    energies = np.sort(np.concatenate([b["energies"] for b in blocks]))
    return SpectralSolution(
        energies=energies,
        basis={"kind": "momentum", "N": N, "J": J, "m_max": m_max, "boundary": boundary},
        blocks=blocks,
    )


def ed_rotor(
    N: int,
    J: float,
    m_max: int = 8,
    boundary: str = "open",
    *,
    beta: float | None = None,
    tol: float = 1e-6,
    max_m: int = 16,
) -> SpectralSolution:
    """Rotor chain in the truncated momentum basis ``|m_1 .. m_N>, |m_i| <= m_max``.

    The Hamiltonian conserves total momentum, so each sector is diagonalised
    separately. When ``beta`` is given, ``m_max`` is raised in steps of 2 until
    F/N changes by less than ``tol``.
    """
    if N > 4:
        raise ConfigurationError("rotor ED is limited to N <= 4", "N")
    if N < 2:
        raise ConfigurationError("rotor chains need N >= 2", "N")
    sol = _ed_rotor_once(N, J, m_max, boundary)
    if beta is None:
        return sol
    f_prev = sol.free_energy(beta) / N
    while True:
        if m_max + 2 > max_m:
            raise ConvergenceError(f"rotor ED not converged up to m_max={m_max}")
        nxt = _ed_rotor_once(N, J, m_max + 2, boundary)
        f_next = nxt.free_energy(beta) / N
        if abs(f_next - f_prev) < tol:
            sol.basis["convergence"] = {"tol": tol, "checked_m_max": m_max + 2}
            return sol
        sol, f_prev, m_max = nxt, f_next, m_max + 2


def free_rotor_free_energy(beta: float, m_cut: int = 10) -> float:
    """Per-rotor free energy -(1/beta) log sum_{|m| <= m_cut} exp(-beta m^2 / 2)."""
    m = np.arange(-m_cut, m_cut + 1)
    return float(-logsumexp(-0.5 * beta * m**2) / beta)


def harmonic_free_energy(beta: float) -> float:
    return float(np.log(2.0 * np.sinh(0.5 * beta)) / beta)


def analytic_kernel(kind: str, x0, xT, T: float) -> float:
    """Closed-form imaginary-time propagators K(xT, T | x0, 0)."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=np.float64))
    xT = np.atleast_1d(np.asarray(xT, dtype=np.float64))
    n = x0.size
    if kind in ("free", "FreeParticle", "free_particle"):
        d2 = float(np.sum((xT - x0) ** 2))
        return float((2 * np.pi * T) ** (-n / 2) * np.exp(-d2 / (2 * T)))
    if kind in ("harmonic", "Harmonic"):
        s, c = np.sinh(T), np.cosh(T)
        expo = np.sum((x0**2 + xT**2) * c - 2 * x0 * xT) / (2 * s)
        return float((2 * np.pi * s) ** (-n / 2) * np.exp(-expo))
    raise ConfigurationError(f"unknown kernel kind {kind!r}", "kind")


analytic_kernels = analytic_kernel


def hydrogen_ground_state_diagonal(x, beta: float) -> float:
    """Large-beta asymptote exp(beta/2) |psi_1s(x)|^2 of the hydrogen diagonal."""
    r = float(np.linalg.norm(x))
    return float(np.exp(0.5 * beta) * np.exp(-2 * r) / np.pi)


def oracle_reference(system: ModelSystem, *, L: float = 10.0, G: int = 2000) -> SpectralSolution:
    """ED solution matching a model system."""
    p = system.potential
    if isinstance(p, AnharmonicOscillator):
        return ed_1d(system, L=L, G=G)
    if isinstance(p, RotorChain):
        return ed_rotor(system.geometry.size, p.J, boundary=p.boundary, beta=system.beta)
    raise ConfigurationError(f"no exact diagonalisation for {type(p).__name__}", "model")


class OracleCache:
    """JSON results on disk keyed by (model, params, resolution)."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def _path(self, key: Mapping) -> Path:
        digest = hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]
        return self.directory / f"oracle-{digest}.json"

    def get_or_compute(self, key: Mapping, compute: Callable[[], Mapping]) -> dict:
        path = self._path(key)
        if path.exists():
            stored = json.loads(path.read_text())
            if stored.get("key") == json.loads(json.dumps(key)):
                return stored["value"]
        value = dict(compute())
        self.directory.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"key": key, "value": value}, sort_keys=True, indent=1))
        return value
