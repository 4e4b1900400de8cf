from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import GradTape, Var
from .errors import ShapeError

ACTIVATIONS = ("tanh", "relu")


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class MlpNet:
    """Fully connected net; ``activation`` on hidden layers, identity on output.

    Weights are stored as (fan_in, fan_out) so a batch ``x`` of shape (n, in)
    maps as ``x @ W + b``.
    """

    layer_dims: list[int]
    weights: list[Var]
    biases: list[Var]
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("need one weight matrix and bias per layer transition")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_dims[i], self.layer_dims[i + 1]) or b.shape != (self.layer_dims[i + 1],):
                raise ShapeError(f"layer {i}: W{w.shape} b{b.shape} vs dims {self.layer_dims}")

    @classmethod
    def create(cls, layer_dims, rng: np.random.Generator, activation: str = "tanh", zero_last: bool = False):
        dims = [int(d) for d in layer_dims]
        if len(dims) < 2 or min(dims) < 1:
            raise ShapeError(f"bad layer dims {dims}")
        weights, biases = [], []
        for i in range(len(dims) - 1):
            w = glorot_uniform(rng, dims[i], dims[i + 1])
            if zero_last and i == len(dims) - 2:
                w = np.zeros_like(w)
            weights.append(Var(w))
            biases.append(Var(np.zeros(dims[i + 1])))
        return cls(dims, weights, biases, activation)

    @classmethod
    def zeros(cls, layer_dims, activation: str = "tanh"):
        dims = [int(d) for d in layer_dims]
        weights = [Var(np.zeros((dims[i], dims[i + 1]))) for i in range(len(dims) - 1)]
        biases = [Var(np.zeros(dims[i + 1])) for i in range(len(dims) - 1)]
        return cls(dims, weights, biases, activation)

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def parameters(self) -> list[Var]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def num_params(self) -> int:
        d = self.layer_dims
        return sum((d[i] + 1) * d[i + 1] for i in range(len(d) - 1))

    def apply(self, x: Var) -> Var:
        """Forward pass on a batch ``Var`` of shape (n, in_dim)."""
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"net expects input width {self.in_dim}, got {x.shape[-1]}")
        act = ad.tanh if self.activation == "tanh" else ad.relu
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = act(h)
        return h

    def __call__(self, x) -> np.ndarray:
        return mlp_forward(self, x)

    def copy(self) -> "MlpNet":
        return MlpNet(
            list(self.layer_dims),
            [Var(w.value.copy()) for w in self.weights],
            [Var(b.value.copy()) for b in self.biases],
            self.activation,
        )


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def mlp_forward(net: MlpNet, x) -> np.ndarray:
    """Evaluate ``net`` on a vector or a (n, in_dim) batch."""
    xb, single = _as_batch(x)
    out = net.apply(Var(xb)).value
    return out[0] if single else out


def mlp_grad(net: MlpNet, loss_adjoint, x) -> list[np.ndarray]:
    """Vector-Jacobian product of the net output with ``loss_adjoint``.

    Returns gradients ordered like ``net.parameters()``.
    """
    xb, single = _as_batch(x)
    adj = np.asarray(loss_adjoint, dtype=np.float64)
    if single:
        adj = adj[None, :]
    with GradTape() as tape:
        out = net.apply(Var(xb))
    return tape.gradient(out, net.parameters(), seed=adj)
