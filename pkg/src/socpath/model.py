"""Physical systems: geometry, potentials and periodic bookkeeping.

Every function here accepts plain arrays or tape variables, so the same
potential is used for sampling and for backpropagation through paths.
Configurations carry the coordinate axis last: ``x[..., dim]``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Union

import numpy as np

from .exceptions import ConfigurationError, DimensionError
from .nn import autodiff as ad

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class Geometry:
    """Either Cartesian R^n or the N-torus of N planar rotors."""

    kind: str
    size: int

    def __post_init__(self):
        if self.kind not in ("cartesian", "torus"):
            raise ConfigurationError(f"unknown geometry kind {self.kind!r}", "geometry")
        if self.kind == "cartesian" and self.size < 1:
            raise ConfigurationError("Cartesian geometry needs n >= 1", "geometry")
        if self.kind == "torus" and self.size < 2:
            raise ConfigurationError("torus geometry needs N >= 2 sites", "geometry")

    @classmethod
    def cartesian(cls, n: int = 1) -> "Geometry":
        return cls("cartesian", int(n))

    @classmethod
    def torus(cls, n_sites: int) -> "Geometry":
        return cls("torus", int(n_sites))

    @property
    def dim(self) -> int:
        return self.size

    @property
    def periodic(self) -> bool:
        return self.kind == "torus"


@dataclass(frozen=True)
class FreeParticle:
    """V = 0 on R^n; the reference case with an exactly known optimal control."""


@dataclass(frozen=True)
class AnharmonicOscillator:
    """V(x) = x^2/2 + lam x^4 in one dimension."""

    lam: float = 0.0


@dataclass(frozen=True)
class Coulomb:
    """Softcore hydrogen potential -1/max(|x|, r_cut) in three dimensions."""

    r_cut: float = 1e-3


@dataclass(frozen=True)
class RotorChain:
    """Nearest-neighbour coupling -J sum cos(theta_i - theta_j)."""

    J: float = 1.0
    boundary: str = "open"


Potential = Union[FreeParticle, AnharmonicOscillator, Coulomb, RotorChain]


@dataclass(frozen=True)
class ModelSystem:
    """A potential on a geometry at inverse temperature ``beta``.

    ``beta`` doubles as the total imaginary time T of every path; there is no
    separate time parameter.
    """

    geometry: Geometry
    potential: Potential
    beta: float

    def __post_init__(self):
        if not self.beta > 0:
            raise ConfigurationError(f"beta must be positive, got {self.beta}", "beta")
        p, g = self.potential, self.geometry
        if isinstance(p, FreeParticle):
            if g.kind != "cartesian":
                raise ConfigurationError("FreeParticle requires a Cartesian geometry", "geometry")
        elif isinstance(p, AnharmonicOscillator):
            if p.lam < 0:
                raise ConfigurationError("anharmonic coupling must be >= 0", "lam")
            if g != Geometry.cartesian(1):
                raise ConfigurationError("AnharmonicOscillator requires Cartesian(1)", "geometry")
        elif isinstance(p, Coulomb):
            if not p.r_cut > 0:
                raise ConfigurationError("r_cut must be positive", "r_cut")
            if g != Geometry.cartesian(3):
                raise ConfigurationError("Coulomb requires Cartesian(3)", "geometry")
        elif isinstance(p, RotorChain):
            if p.J < 0:
                raise ConfigurationError("rotor coupling must be >= 0", "J")
            if p.boundary not in ("open", "periodic"):
                raise ConfigurationError(f"unknown boundary {p.boundary!r}", "boundary")
            if g.kind != "torus":
                raise ConfigurationError("RotorChain requires a torus geometry", "geometry")
            if p.boundary == "periodic" and g.size < 3:
                raise ConfigurationError("periodic chains need N >= 3", "boundary")
        else:
            raise ConfigurationError(f"unsupported potential {p!r}", "potential")

    @classmethod
    def free(cls, beta: float, n: int = 1) -> "ModelSystem":
        return cls(Geometry.cartesian(n), FreeParticle(), float(beta))

    @classmethod
    def anharmonic(cls, lam: float, beta: float) -> "ModelSystem":
        return cls(Geometry.cartesian(1), AnharmonicOscillator(float(lam)), float(beta))

    @classmethod
    def coulomb(cls, beta: float, r_cut: float = 1e-3) -> "ModelSystem":
        return cls(Geometry.cartesian(3), Coulomb(float(r_cut)), float(beta))

    @classmethod
    def rotor_chain(cls, n_sites: int, J: float, beta: float, boundary: str = "open") -> "ModelSystem":
        return cls(Geometry.torus(n_sites), RotorChain(float(J), boundary), float(beta))

    @property
    def dim(self) -> int:
        return self.geometry.dim

    @property
    def T(self) -> float:
        return self.beta

    @property
    def n_particles(self) -> int:
        """Number of rotors on the torus, one particle otherwise."""
        return self.geometry.size if self.geometry.periodic else 1

    def with_sites(self, n_sites: int) -> "ModelSystem":
        """Same rotor chain with a different number of sites."""
        if not isinstance(self.potential, RotorChain):
            raise ConfigurationError("only rotor chains can be resized", "N")
        return replace(self, geometry=Geometry.torus(n_sites))

    def describe(self) -> dict:
        p = self.potential
        out = {"beta": self.beta, "dim": self.dim}
        if isinstance(p, FreeParticle):
            out.update(model="free")
        elif isinstance(p, AnharmonicOscillator):
            out.update(model="anharmonic", lam=p.lam)
        elif isinstance(p, Coulomb):
            out.update(model="coulomb", r_cut=p.r_cut)
        else:
            out.update(model="rotor", J=p.J, N=self.geometry.size, boundary=p.boundary)
        return out


def check_configuration(system_or_geometry, x, *, allow_batch: bool = True):
    """Validate that the trailing axis of ``x`` matches the geometry."""
    geometry = getattr(system_or_geometry, "geometry", system_or_geometry)
    shape = np.shape(ad.value_of(x))
    if len(shape) == 0 or shape[-1] != geometry.dim:
        raise DimensionError(f"expected trailing dimension {geometry.dim}, got shape {shape}")
    if not allow_batch and len(shape) != 1:
        raise DimensionError(f"expected a single configuration, got shape {shape}")
    return x


def potential_energy(system: ModelSystem, x):
    """V(x) for configurations ``x[..., dim]``; returns shape ``x.shape[:-1]``."""
    check_configuration(system, x)
    p = system.potential
    if isinstance(p, FreeParticle):
        return np.zeros(np.shape(ad.value_of(x))[:-1])
    if isinstance(p, AnharmonicOscillator):
        q = x[..., 0]
        q2 = q * q
        return 0.5 * q2 + p.lam * (q2 * q2)
    if isinstance(p, Coulomb):
        r = ad.sqrt(ad.sum(x * x, axis=-1))
        return -1.0 / ad.maximum(r, p.r_cut)
    # rotor chain
    bonds = x[..., 1:] - x[..., :-1]
    energy = -p.J * ad.sum(ad.cos(bonds), axis=-1)
    if p.boundary == "periodic":
        energy = energy - p.J * ad.cos(x[..., 0] - x[..., -1])
    return energy


def wrap(geometry: Geometry, x):
    """Reduce torus coordinates to [-pi, pi); identity on Cartesian space."""
    if not geometry.periodic:
        return x
    return ad.wrap_angle(x)


def circular_displacement(geometry: Geometry, a, b):
    """Minimal signed displacement from ``b`` to ``a``."""
    sa, sb = np.shape(ad.value_of(a)), np.shape(ad.value_of(b))
    if sa[-1:] != sb[-1:] or (sa and sa[-1] != geometry.dim):
        raise DimensionError(f"incompatible shapes {sa} and {sb} for dim {geometry.dim}")
    d = a - b
    return ad.wrap_angle(d) if geometry.periodic else d
