"""Controller networks.

Both controllers keep their parameters in an ordered ``dict`` of arrays and
take an optional ``params`` mapping in ``forward``. Passing tape variables in
that mapping records the forward pass for backpropagation; passing nothing
evaluates with plain numpy.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from ..exceptions import DimensionError
from . import autodiff as ad


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class MlpController:
    """Feed-forward tanh network with a zero-initialised output layer."""

    kind = "mlp"

    def __init__(self, in_dim: int, out_dim: int, hidden: Sequence[int] = (64, 64), seed: int = 0):
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.hidden = tuple(int(h) for h in hidden)
        rng = np.random.default_rng(seed)
        sizes = (self.in_dim, *self.hidden, self.out_dim)
        self.params: dict[str, np.ndarray] = {}
        n_layers = len(sizes) - 1
        for i in range(n_layers):
            last = i == n_layers - 1
            w = np.zeros((sizes[i], sizes[i + 1])) if last else _glorot(rng, sizes[i], sizes[i + 1])
            self.params[f"W{i}"] = w
            self.params[f"b{i}"] = np.zeros(sizes[i + 1])

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    def architecture(self) -> dict:
        return {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim, "hidden": list(self.hidden)}

    def forward(self, inputs, params: Mapping | None = None):
        p = self.params if params is None else params
        if np.shape(ad.value_of(inputs))[-1] != self.in_dim:
            raise DimensionError(
                f"MLP expects {self.in_dim} input features, got {np.shape(ad.value_of(inputs))[-1]}"
            )
        h = inputs
        for i in range(self.n_layers):
            h = h @ p[f"W{i}"] + p[f"b{i}"]
            if i < self.n_layers - 1:
                h = ad.tanh(h)
        return h

    __call__ = forward


class BiRecurrentController:
    """Shared LSTM cell scanned left-to-right and right-to-left over sites.

    Each layer owns one cell used for both scan directions and every site, so
    the parameter count does not depend on the chain length. The two
    directions are evaluated as one stacked batch. A dense head maps the
    concatenated final-layer states of both directions to one control value
    per site.
    """

    kind = "birecurrent"

    def __init__(self, n_features: int = 5, hidden: int = 32, depth: int = 2, seed: int = 0):
        self.n_features = int(n_features)
        self.hidden_size = int(hidden)
        self.depth = int(depth)
        rng = np.random.default_rng(seed)
        H = self.hidden_size
        self.params: dict[str, np.ndarray] = {}
        for layer in range(self.depth):
            fan_in = self.n_features if layer == 0 else H
            self.params[f"Wx{layer}"] = _glorot(rng, fan_in, 4 * H)
            self.params[f"Wh{layer}"] = _glorot(rng, H, 4 * H)
            b = np.zeros(4 * H)
            b[H:2 * H] = 1.0  # forget gate
            self.params[f"b{layer}"] = b
        self.params["Wout"] = np.zeros((2 * H, 1))
        self.params["bout"] = np.zeros(1)

    def architecture(self) -> dict:
        return {
            "kind": self.kind,
            "n_features": self.n_features,
            "hidden": self.hidden_size,
            "depth": self.depth,
        }

    def _scan(self, inputs: list, layer: int, p: Mapping) -> list:
        """Run one shared cell over a list of per-site inputs ``[batch, F]``."""
        H = self.hidden_size
        Wx, Wh, b = p[f"Wx{layer}"], p[f"Wh{layer}"], p[f"b{layer}"]
        h = c = None
        states = []
        for x in inputs:
            gates = x @ Wx + b
            if h is not None:
                gates = gates + h @ Wh
            hc = ad.lstm_cell(gates, c)
            h, c = hc[:, :H], hc[:, H:]
            states.append(h)
        return states

    def forward(self, site_features, params: Mapping | None = None):
        """Controls ``[batch, N]`` from features ``[batch, N, F]`` for any N >= 1."""
        p = self.params if params is None else params
        shape = np.shape(ad.value_of(site_features))
        if len(shape) != 3 or shape[-1] != self.n_features:
            raise DimensionError(f"expected [batch, N, {self.n_features}] features, got {shape}")
        batch, n_sites = shape[0], shape[1]
        # both scan directions share the cell, so run them as one stacked batch
        sites = [site_features[:, j, :] for j in range(n_sites)]
        x = [ad.concat([sites[j], sites[n_sites - 1 - j]], axis=0) for j in range(n_sites)]
        for layer in range(self.depth):
            x = self._scan(x, layer, p)
        both = ad.stack(
            [ad.concat([x[j][:batch], x[n_sites - 1 - j][batch:]], axis=-1) for j in range(n_sites)], axis=1
        )
        out = both @ p["Wout"] + p["bout"]
        return out[..., 0]

    __call__ = forward


def parameter_count(controller) -> int:
    return int(sum(v.size for v in controller.params.values()))


def build_controller(architecture: Mapping, seed: int = 0):
    """Instantiate a controller from its architecture descriptor."""
    kind = architecture.get("kind")
    if kind == "mlp":
        return MlpController(architecture["in_dim"], architecture["out_dim"], architecture["hidden"], seed=seed)
    if kind == "birecurrent":
        return BiRecurrentController(
            architecture["n_features"], architecture["hidden"], architecture["depth"], seed=seed
        )
    raise ValueError(f"unknown controller kind {kind!r}")
