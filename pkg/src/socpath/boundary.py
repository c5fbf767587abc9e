"""Boundary-point distributions P(z) for the trace over closed paths."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError, ConvergenceError
from .model import AnharmonicOscillator, FreeParticle, ModelSystem, RotorChain

LOG_2PI = np.log(2.0 * np.pi)


def _s2(omega: float, beta: float) -> float:
    return 1.0 / (np.tanh(0.5 * beta * omega) * 2.0 * omega)


def fit_jensen_feynman(lam: float, beta: float, *, tol: float = 1e-10, max_iter: int = 200):
    """Trial frequency of the best harmonic action for V = x^2/2 + lam x^4.

    Solves ``Omega^2 = 1 + 12 lam s^2(Omega)`` with
    ``s^2 = coth(beta Omega / 2) / (2 Omega)`` by bisection and returns
    ``(Omega, s^2)``.
    """
    if lam < 0 or not beta > 0:
        raise ConfigurationError("need lam >= 0 and beta > 0", "lam")
    f = lambda w: w * w - 1.0 - 12.0 * lam * _s2(w, beta)  # noqa: E731
    lo, hi = 1.0, 2.0
    if f(lo) >= 0:
        return 1.0, _s2(1.0, beta)
    for _ in range(200):
        if f(hi) > 0:
            break
        lo, hi = hi, 2.0 * hi
    else:
        raise ConvergenceError("could not bracket the Jensen-Feynman frequency")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        val = f(mid)
        if abs(val) < tol:
            return mid, _s2(mid, beta)
        if val > 0:
            hi = mid
        else:
            lo = mid
    raise ConvergenceError(f"bisection did not reach |residual| < {tol} in {max_iter} iterations")


def rotor_sigma2(J: float, beta: float) -> float:
    """Angular step variance coth(beta sqrt(J) / 2) / (2 sqrt(J))."""
    if J <= 0:
        return np.inf
    w = np.sqrt(J)
    return _s2(w, beta)


def log_wrapped_normal(d, var: float, *, cutoff: float = 1e-16):
    """Log density of the wrapped normal at angles ``d``.

    The winding sum grows outward from the central term and stops once the
    next pair of terms is below ``cutoff`` relative to the largest.
    """
    d = np.asarray(wrap_angle_np(d), dtype=np.float64)
    if not np.isfinite(var):
        return np.full(d.shape, -LOG_2PI)
    base = -0.5 * d**2 / var
    total = np.ones_like(d)
    w = 1
    while True:
        hi = np.exp(-0.5 * (d + 2 * np.pi * w) ** 2 / var - base)
        lo = np.exp(-0.5 * (d - 2 * np.pi * w) ** 2 / var - base)
        total = total + hi + lo
        if np.all(hi + lo < cutoff * total):
            break
        w += 1
    return base + np.log(total) - 0.5 * np.log(2 * np.pi * var)


def wrap_angle_np(x):
    y = np.mod(np.asarray(x, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    return np.where(y >= np.pi, -np.pi, y)


@dataclass(frozen=True)
class JensenFeynmanGaussian:
    """z ~ N(0, s^2 I) in R^n."""

    s2: float
    omega: float = 1.0
    dim: int = 1

    @classmethod
    def fit(cls, system: ModelSystem) -> "JensenFeynmanGaussian":
        p = system.potential
        if isinstance(p, AnharmonicOscillator):
            omega, s2 = fit_jensen_feynman(p.lam, system.beta)
        elif isinstance(p, FreeParticle):
            raise ConfigurationError("the free particle has no normalisable trace", "model")
        else:
            raise ConfigurationError("Jensen-Feynman boundary needs the anharmonic oscillator", "model")
        return cls(s2, omega, system.dim)

    def sample(self, rng: np.random.Generator, M: int) -> np.ndarray:
        return rng.standard_normal((M, self.dim)) * np.sqrt(self.s2)

    def log_density(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        return -0.5 * np.sum(z**2, axis=-1) / self.s2 - 0.5 * self.dim * np.log(2 * np.pi * self.s2)

    def describe(self) -> dict:
        return {"kind": "jensen_feynman", "omega": self.omega, "s2": self.s2}


@dataclass(frozen=True)
class WrappedAutoregressive:
    """z_1 uniform on the circle, then wrapped-normal steps of variance c_P sigma^2.

    ``sigma2 = inf`` (zero coupling) makes every angle uniform.
    """

    sigma2: float
    n_sites: int
    c_P: float = 1.0

    @classmethod
    def fit(cls, system: ModelSystem, c_P: float = 1.0) -> "WrappedAutoregressive":
        p = system.potential
        if not isinstance(p, RotorChain):
            raise ConfigurationError("wrapped autoregressive boundary needs a rotor chain", "model")
        if not c_P > 0:
            raise ConfigurationError("c_P must be positive", "c_P")
        return cls(rotor_sigma2(p.J, system.beta), system.geometry.size, float(c_P))

    @property
    def step_variance(self) -> float:
        return self.c_P * self.sigma2

    def sample(self, rng: np.random.Generator, M: int) -> np.ndarray:
        z = np.empty((M, self.n_sites))
        z[:, 0] = rng.uniform(-np.pi, np.pi, M)
        var = self.step_variance
        for i in range(1, self.n_sites):
            if np.isfinite(var):
                step = rng.standard_normal(M) * np.sqrt(var)
                z[:, i] = wrap_angle_np(z[:, i - 1] + step)
            else:
                z[:, i] = rng.uniform(-np.pi, np.pi, M)
        return wrap_angle_np(z)

    def log_density(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        steps = np.diff(z, axis=-1)
        return -LOG_2PI + np.sum(log_wrapped_normal(steps, self.step_variance), axis=-1)

    def describe(self) -> dict:
        return {"kind": "wrapped_autoregressive", "sigma2": self.sigma2, "c_P": self.c_P, "z1": "uniform"}


BoundaryDistribution = JensenFeynmanGaussian | WrappedAutoregressive


def default_boundary(system: ModelSystem, c_P: float = 1.0):
    if isinstance(system.potential, RotorChain):
        return WrappedAutoregressive.fit(system, c_P)
    return JensenFeynmanGaussian.fit(system)


def sample_boundary(dist, M: int, seed: int = 0, *, stream: int = 1, block: int = 0):
    """Draw M boundary points and their log densities.

    Uses a dedicated (seed, stream, block) generator so boundary points never
    share draws with path noise.
    """
    if M < 1:
        raise ConfigurationError("need at least one boundary point", "M")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(int(stream), int(block)))))
    z = dist.sample(rng, int(M))
    return z, dist.log_density(z)
