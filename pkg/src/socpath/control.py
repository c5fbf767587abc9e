"""Control functions u(x, t | z) = bridge drift + neural residual."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .exceptions import ArchitectureError, ConfigurationError
from .model import Geometry, ModelSystem, circular_displacement
from .nn import autodiff as ad
from .nn.checkpoint import controller_from_checkpoint, to_checkpoint
from .nn.layers import BiRecurrentController, MlpController

DEFAULT_EPS = 0.05


def features(x, z, t: float, geometry: Geometry, T: float, time_feature: str = "normalized"):
    """Network inputs for positions ``x[..., dim]`` and endpoints ``z``.

    Cartesian space gives ``concat(x, z, t/T)`` along the last axis. On the
    torus every site gets ``(sin x_i, cos x_i, sin z_i, cos z_i, t/T)``,
    shaped ``[..., N, 5]``; raw angles never reach the network.
    """
    tau = t / T if time_feature == "normalized" else t
    xv = ad.value_of(x)
    batch_shape = np.shape(xv)[:-1]
    z = np.broadcast_to(np.asarray(z, dtype=np.float64), np.shape(xv))
    if geometry.periodic:
        tcol = np.full(np.shape(xv), tau)
        return ad.stack([ad.sin(x), ad.cos(x), np.sin(z), np.cos(z), tcol], axis=-1)
    tcol = np.full(batch_shape + (1,), tau)
    return ad.concat([x, z, tcol], axis=-1)


@dataclass
class ControlFunction:
    """Drift for the controlled process.

    ``bridge_eps`` regularises the bridge singularity at t = T. When left as
    None it is matched to the terminal smoothing width as ``eps**2``, which
    makes the bare bridge the exact optimal control of a free particle.
    ``endpoint`` fixes z for propagator use; ensembles pass z per path.
    """

    geometry: Geometry
    T: float
    residual: MlpController | BiRecurrentController | None = None
    bridge: bool = True
    bridge_eps: float | None = None
    endpoint: np.ndarray | None = None
    time_feature: str = "normalized"

    def __post_init__(self):
        if self.bridge_eps is not None and not self.bridge_eps > 0:
            raise ConfigurationError("bridge regulariser must be positive", "bridge_eps")
        if self.time_feature not in ("normalized", "absolute"):
            raise ConfigurationError(f"unknown time feature {self.time_feature!r}", "time_feature")
        if self.endpoint is not None:
            self.endpoint = np.asarray(self.endpoint, dtype=np.float64).reshape(self.geometry.dim)

    @classmethod
    def for_system(
        cls,
        system: ModelSystem,
        residual: str | None = "auto",
        *,
        hidden=None,
        seed: int = 0,
        **kwargs,
    ) -> "ControlFunction":
        """Default control for a model: MLP on R^n, bidirectional LSTM on the torus."""
        g = system.geometry
        if residual == "auto":
            residual = "birecurrent" if g.periodic else "mlp"
        if residual is None:
            net = None
        elif residual == "mlp":
            in_dim = 5 * g.dim if g.periodic else 2 * g.dim + 1
            net = MlpController(in_dim, g.dim, hidden or (64, 64), seed=seed)
        elif residual == "birecurrent":
            if not g.periodic:
                raise ConfigurationError("the recurrent controller needs a torus geometry", "residual")
            net = BiRecurrentController(5, hidden or 32, 2, seed=seed)
        else:
            raise ConfigurationError(f"unknown residual kind {residual!r}", "residual")
        return cls(g, system.T, net, **kwargs)

    def regularizer(self, terminal_eps: float = DEFAULT_EPS) -> float:
        return self.bridge_eps if self.bridge_eps is not None else terminal_eps ** 2

    def resolve_endpoint(self, z, shape):
        if z is None:
            if self.endpoint is None:
                raise ConfigurationError("no endpoint z given and none fixed on the control", "endpoint")
            z = self.endpoint
        return np.broadcast_to(np.asarray(z, dtype=np.float64), shape)

    def residual_drift(self, x, t: float, z, params: Mapping | None = None):
        if self.residual is None:
            return None
        feats = features(x, z, t, self.geometry, self.T, self.time_feature)
        if isinstance(self.residual, MlpController) and self.geometry.periodic:
            shape = np.shape(ad.value_of(feats))
            feats = ad.reshape(feats, shape[:-2] + (shape[-2] * shape[-1],))
        return self.residual.forward(feats, params)

    def drift(self, x, t: float, z=None, params: Mapping | None = None, terminal_eps: float = DEFAULT_EPS):
        """u(x, t | z) for positions ``x[..., dim]``."""
        if t >= self.T:
            raise ConfigurationError(f"control evaluated at t={t} >= T={self.T}", "t")
        z = self.resolve_endpoint(z, np.shape(ad.value_of(x)))
        u = None
        if self.bridge:
            disp = circular_displacement(self.geometry, z, x)
            u = disp * (1.0 / (self.T - t + self.regularizer(terminal_eps)))
        res = self.residual_drift(x, t, z, params)
        if res is None:
            if u is None:
                return np.zeros(np.shape(ad.value_of(x)))
            return u
        return res if u is None else u + res

    __call__ = drift

    def settings(self) -> dict:
        return {
            "bridge": self.bridge,
            "bridge_eps": self.bridge_eps,
            "time_feature": self.time_feature,
            "geometry": {"kind": self.geometry.kind, "size": self.geometry.size},
            "T": self.T,
        }

    def to_checkpoint(self, metadata: Mapping | None = None) -> dict:
        if self.residual is None:
            raise ArchitectureError("a bridge-only control has no parameters to checkpoint")
        return to_checkpoint(self.residual, control=self.settings(), metadata=metadata)

    @classmethod
    def from_checkpoint(cls, ckpt: Mapping, system: ModelSystem | None = None) -> "ControlFunction":
        """Rebuild a control, optionally retargeted to ``system`` (e.g. a longer chain)."""
        net = controller_from_checkpoint(ckpt)
        c = ckpt.get("control", {})
        if system is None:
            g = c.get("geometry", {})
            geometry = Geometry(g["kind"], g["size"])
            T = c["T"]
        else:
            geometry, T = system.geometry, system.T
            if isinstance(net, MlpController):
                expected = 5 * geometry.dim if geometry.periodic else 2 * geometry.dim + 1
                if net.in_dim != expected or net.out_dim != geometry.dim:
                    raise ArchitectureError(
                        f"MLP checkpoint ({net.in_dim}->{net.out_dim}) does not fit dim {geometry.dim}"
                    )
            elif not geometry.periodic:
                raise ArchitectureError("recurrent checkpoint needs a torus geometry")
        return cls(
            geometry,
            T,
            net,
            bridge=c.get("bridge", True),
            bridge_eps=c.get("bridge_eps"),
            time_feature=c.get("time_feature", "normalized"),
        )


def evaluate_control(ctrl: ControlFunction, x, t: float, z=None, params=None, terminal_eps: float = DEFAULT_EPS):
    """Functional alias of :meth:`ControlFunction.drift`."""
    return ctrl.drift(x, t, z, params, terminal_eps)
