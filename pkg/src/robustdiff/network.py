"""Score network: shared MLP trunk with a demonstration head and a condition head.

The trunk consumes a preconditioned input vector (scaled point, log-noise
channel, condition channels). Both heads are linear readouts of the trunk
features, so trunk updates move both outputs — the parameter-sharing that lets
the condition head ride on representations learned by denoising.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn_core
from .nn_core import MlpTape, ParamBundle, Var


@dataclass
class ScoreNetwork:
    params: ParamBundle
    x_dim: int = 2
    cond_dim: int = 4
    hidden: int = 64
    depth: int = 3
    sigma_data: float = 0.5
    activation: str = "silu"

    @classmethod
    def create(
        cls,
        x_dim: int = 2,
        cond_dim: int = 4,
        hidden: int = 64,
        depth: int = 3,
        sigma_data: float = 0.5,
        seed: int = 0,
    ) -> "ScoreNetwork":
        """Fresh network; trunk Glorot-initialized, both heads start at zero."""
        in_dim = x_dim + 1 + cond_dim
        shapes = [(in_dim, hidden)] + [(hidden, hidden)] * (depth - 1)
        shapes += [(hidden, x_dim), (hidden, cond_dim)]  # demo head, cond head
        params = nn_core.init_params(shapes, seed, zero_layers=(depth, depth + 1))
        return cls(params, x_dim, cond_dim, hidden, depth, sigma_data)

    @property
    def in_dim(self) -> int:
        return self.x_dim + 1 + self.cond_dim

    @property
    def trunk_layers(self) -> list[int]:
        return list(range(self.depth))

    @property
    def demo_head_layer(self) -> int:
        return self.depth

    @property
    def cond_head_layer(self) -> int:
        return self.depth + 1

    # -- fast numpy paths ---------------------------------------------------

    def _check_input(self, net_in: np.ndarray) -> np.ndarray:
        net_in = np.asarray(net_in, dtype=np.float64)
        if net_in.shape[-1] != self.in_dim:
            raise nn_core.ShapeError(
                f"network input width {net_in.shape[-1]}, expected {self.in_dim}"
            )
        return net_in

    def trunk_features(self, net_in: np.ndarray) -> np.ndarray:
        h = self._check_input(net_in)
        for k in self.trunk_layers:
            w, b = self.params.layer(k)
            h = h @ w + b
            h = h * nn_core._sigmoid(h)  # SiLU
        return h

    def demo_out(self, net_in: np.ndarray) -> np.ndarray:
        w, b = self.params.layer(self.demo_head_layer)
        return self.trunk_features(net_in) @ w + b

    def cond_out(self, net_in: np.ndarray) -> np.ndarray:
        w, b = self.params.layer(self.cond_head_layer)
        return self.trunk_features(net_in) @ w + b

    # -- differentiable paths (shared tape) ----------------------------------

    def trunk_var(self, tape: MlpTape, net_in) -> Var:
        h = net_in
        for k in self.trunk_layers:
            h = tape.dense(h, k, self.activation)
        return h

    def demo_var(self, tape: MlpTape, net_in) -> Var:
        return tape.dense(self.trunk_var(tape, net_in), self.demo_head_layer, None)

    def cond_var(self, tape: MlpTape, net_in) -> Var:
        return tape.dense(self.trunk_var(tape, net_in), self.cond_head_layer, None)

    def copy(self) -> "ScoreNetwork":
        return ScoreNetwork(
            self.params.copy(),
            self.x_dim,
            self.cond_dim,
            self.hidden,
            self.depth,
            self.sigma_data,
            self.activation,
        )
