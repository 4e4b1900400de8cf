"""Parametric affine coupling flows.

A model maps an action ``a`` (width d_a) under context ``c`` (width d_c) as

    a -> (a, a W) -> [permute, couple] x N -> head

Every coupling layer keeps its first ``split`` coordinates and updates the
rest by ``x * exp(sigma(c, x_keep)) + t(c, x_keep)``, so the flow body is
exactly invertible for any fixed context.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .numkit import MlpNet, ShapeError, TrainConfig, Var, minibatch_train
from .numkit import autodiff as ad
from .numkit.errors import NumericError

SIGMA_CLAMP = 8.0
SCHEMA_VERSION = 1


class Permutation:
    """Fixed coordinate shuffle; ``apply(x)[:, i] == x[:, perm[i]]``."""

    def __init__(self, perm):
        perm = np.asarray(perm, dtype=np.int64)
        if sorted(perm.tolist()) != list(range(len(perm))):
            raise ValueError(f"not a permutation: {perm.tolist()}")
        self.perm = perm
        self.inv = np.argsort(perm)

    @classmethod
    def identity(cls, d: int) -> "Permutation":
        return cls(np.arange(d))

    @classmethod
    def random(cls, d: int, rng: np.random.Generator) -> "Permutation":
        return cls(rng.permutation(d))

    def __len__(self) -> int:
        return len(self.perm)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return x[..., self.perm]

    def inverse(self, y: np.ndarray) -> np.ndarray:
        return y[..., self.inv]

    def apply_var(self, x: Var) -> Var:
        if np.array_equal(self.perm, np.arange(len(self.perm))):
            return x
        return ad.take_cols(x, self.perm)


def _cond_apply(net, h: Var) -> Var:
    if isinstance(net, MlpNet):
        return net.apply(h)
    # analytic conditioner: plain callable on arrays, not differentiated
    return Var(np.asarray(net(h.value), dtype=np.float64).reshape(h.shape[0], -1))


def _broadcast_context(c, n: int, m: int) -> np.ndarray:
    if m == 0:
        return np.zeros((n, 0))
    c = np.asarray(c, dtype=np.float64)
    if c.ndim == 1:
        if c.shape[0] != m:
            raise ShapeError(f"context width {c.shape[0]} != {m}")
        return np.broadcast_to(c, (n, m))
    if c.shape != (n, m):
        raise ShapeError(f"context shape {c.shape} != {(n, m)}")
    return c


def _batch(x, d: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != d:
        raise ShapeError(f"expected width {d}, got {x.shape[1]}")
    return x, single


class CouplingLayer:
    """Affine coupling on width ``d`` keeping coordinates ``[:split]``.

    ``sigma_net`` and ``t_net`` take ``(c, x[:split])`` of width
    ``cond_dim + split`` and return ``d - split`` values.  They are usually
    :class:`MlpNet` instances; any vectorised callable works for evaluation.
    """

    def __init__(self, d: int, split: int, cond_dim: int, sigma_net, t_net, clamp: float = SIGMA_CLAMP):
        if not 1 <= split < d:
            raise ShapeError(f"split must satisfy 1 <= split < d, got split={split}, d={d}")
        for name, net in (("sigma", sigma_net), ("t", t_net)):
            if isinstance(net, MlpNet) and (net.in_dim != cond_dim + split or net.out_dim != d - split):
                raise ShapeError(
                    f"{name} net dims {net.in_dim}->{net.out_dim}, need {cond_dim + split}->{d - split}"
                )
        self.d = d
        self.split = split
        self.cond_dim = cond_dim
        self.sigma_net = sigma_net
        self.t_net = t_net
        self.clamp = clamp

    @classmethod
    def create(
        cls,
        d: int,
        split: int,
        cond_dim: int,
        hidden: Sequence[int],
        rng: np.random.Generator,
        activation: str = "tanh",
        zero_last: bool = False,
    ) -> "CouplingLayer":
        dims = [cond_dim + split, *hidden, d - split]
        return cls(
            d,
            split,
            cond_dim,
            MlpNet.create(dims, rng, activation, zero_last),
            MlpNet.create(dims, rng, activation, zero_last),
        )

    def parameters(self) -> list[Var]:
        out = []
        for net in (self.sigma_net, self.t_net):
            if isinstance(net, MlpNet):
                out += net.parameters()
        return out

    def _scale_shift(self, c: Var | None, keep: Var) -> tuple[Var, Var]:
        h = keep if self.cond_dim == 0 else ad.concat([c, keep])
        s = ad.clip(_cond_apply(self.sigma_net, h), -self.clamp, self.clamp)
        t = _cond_apply(self.t_net, h)
        return s, t

    def forward_var(self, c: Var | None, x: Var) -> Var:
        keep = ad.take_cols(x, slice(0, self.split))
        moved = ad.take_cols(x, slice(self.split, self.d))
        s, t = self._scale_shift(c, keep)
        return ad.concat([keep, moved * ad.exp(s) + t])

    def forward(self, c, x) -> np.ndarray:
        xb, single = _batch(x, self.d)
        cb = _broadcast_context(c, len(xb), self.cond_dim)
        s, t = self._scale_shift(Var(cb), Var(xb[:, : self.split]))
        if not np.all(np.isfinite(s.value)):
            raise NumericError("non-finite scale in coupling layer")
        y = xb.copy()
        y[:, self.split :] = xb[:, self.split :] * np.exp(s.value) + t.value
        return y[0] if single else y

    def inverse(self, c, y) -> np.ndarray:
        yb, single = _batch(y, self.d)
        cb = _broadcast_context(c, len(yb), self.cond_dim)
        s, t = self._scale_shift(Var(cb), Var(yb[:, : self.split]))
        x = yb.copy()
        x[:, self.split :] = (yb[:, self.split :] - t.value) * np.exp(-s.value)
        return x[0] if single else x

    def log_det(self, c, x) -> np.ndarray:
        xb, single = _batch(x, self.d)
        cb = _broadcast_context(c, len(xb), self.cond_dim)
        s, _ = self._scale_shift(Var(cb), Var(xb[:, : self.split]))
        ld = s.value.sum(axis=1)
        return ld[0] if single else ld


def ascend(a, W) -> np.ndarray:
    """Lift ``a`` to ``(a, a @ W)``."""
    W = np.asarray(W.value if isinstance(W, Var) else W, dtype=np.float64)
    ab, single = _batch(a, W.shape[0])
    out = np.concatenate([ab, ab @ W], axis=1)
    return out[0] if single else out


def split_index(d_a: int, d: int) -> int:
    return max(d_a, d // 2)


@dataclass
class ParaCFlowModel:
    d_a: int
    d_c: int
    d: int
    W: Var
    layers: list[tuple[Permutation, CouplingLayer]]
    head: MlpNet | None = None
    train_W: bool = True
    # output width when there is no head: the leading coordinates of the features
    n_out: int = 1
    seed: int = 0
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.W.shape != (self.d_a, self.d - self.d_a):
            raise ShapeError(f"W shape {self.W.shape} != {(self.d_a, self.d - self.d_a)}")
        for perm, layer in self.layers:
            if len(perm) != self.d or layer.d != self.d or layer.cond_dim != self.d_c:
                raise ShapeError("layer width or context width does not match the model")
        if self.head is not None and self.head.in_dim != self.d:
            raise ShapeError(f"head input {self.head.in_dim} != flow width {self.d}")

    def parameters(self) -> list[Var]:
        out = [self.W] if self.train_W else []
        for _, layer in self.layers:
            out += layer.parameters()
        if self.head is not None:
            out += self.head.parameters()
        return out

    def num_params(self) -> int:
        return int(sum(p.value.size for p in self.parameters()))

    # Var paths, used for training
    def body_var(self, c: Var | None, x: Var) -> Var:
        for perm, layer in self.layers:
            x = layer.forward_var(c, perm.apply_var(x))
        return x

    def features_var(self, c: Var | None, a: Var) -> Var:
        x = ad.concat([a, a @ self.W]) if self.d > self.d_a else a
        return self.body_var(c, x)

    def output_var(self, c: Var | None, a: Var) -> Var:
        z = self.features_var(c, a)
        if self.head is None:
            return ad.take_cols(z, slice(0, self.n_out))
        return self.head.apply(z)

    # array paths
    def body_forward(self, c, x) -> np.ndarray:
        xb, single = _batch(x, self.d)
        cb = _broadcast_context(c, len(xb), self.d_c)
        for perm, layer in self.layers:
            xb = layer.forward(cb, perm.apply(xb))
        return xb[0] if single else xb

    def body_inverse(self, c, y) -> np.ndarray:
        yb, single = _batch(y, self.d)
        cb = _broadcast_context(c, len(yb), self.d_c)
        for perm, layer in reversed(self.layers):
            yb = perm.inverse(layer.inverse(cb, yb))
        return yb[0] if single else yb

    def features(self, c, a) -> np.ndarray:
        return paracflow_features(self, c, a)

    def predict(self, c, a) -> np.ndarray:
        return paracflow_predict(self, c, a)


def paracflow_features(model: ParaCFlowModel, c, a) -> np.ndarray:
    return model.body_forward(c, ascend(a, model.W))


def paracflow_predict(model: ParaCFlowModel, c, a) -> np.ndarray:
    """Head output; shape (n,) for a batch, a float for a single point.

    Without a head the leading ``n_out`` feature coordinates are returned.
    """
    a = np.asarray(a, dtype=np.float64)
    single = a.ndim == 1
    z = paracflow_features(model, c, a if not single else a[None, :])
    if model.head is None:
        out = z[:, : model.n_out]
        return out[0] if single else out
    out = model.head(z)[:, 0]
    return float(out[0]) if single else out


def build_paracflow(
    d_a: int,
    d_c: int,
    d: int,
    n_layers: int,
    hidden: Sequence[int],
    seed: int,
    head_hidden: Sequence[int] | None = (),
    activation: str = "tanh",
    zero_pad: bool = False,
    identity_init: bool = False,
    n_out: int = 1,
) -> ParaCFlowModel:
    """Random Para-CFlow.

    ``head_hidden=None`` drops the head (outputs are leading features).
    ``zero_pad`` freezes W at zero, i.e. plain zero padding.
    ``identity_init`` zeroes the last layer of every conditioner so the
    body starts as the identity.
    """
    if d <= d_a:
        raise ShapeError(f"flow width d={d} must exceed action width {d_a}")
    rng = np.random.default_rng(seed)
    split = split_index(d_a, d)
    if zero_pad:
        W = Var(np.zeros((d_a, d - d_a)))
    else:
        from .numkit import glorot_uniform

        W = Var(glorot_uniform(rng, d_a, d - d_a))
    layers = []
    for _ in range(n_layers):
        perm = Permutation.random(d, rng)
        layers.append((perm, CouplingLayer.create(d, split, d_c, hidden, rng, activation, identity_init)))
    head = None if head_hidden is None else MlpNet.create([d, *head_hidden, 1], rng, activation)
    cfg = dict(
        d_a=d_a,
        d_c=d_c,
        d=d,
        n_layers=n_layers,
        hidden=list(hidden),
        head_hidden=None if head_hidden is None else list(head_hidden),
        activation=activation,
        zero_pad=zero_pad,
        identity_init=identity_init,
        n_out=n_out,
    )
    return ParaCFlowModel(d_a, d_c, d, W, layers, head, not zero_pad, n_out, seed, cfg)


def train_mse(model: ParaCFlowModel, C, A, B, cfg: TrainConfig | None = None) -> list[float]:
    """Minimise the mean squared error of ``model.output_var`` against ``B``.

    ``B`` is (n,) for a scalar head or (n, n_out) without one; for multi-
    column targets the error is averaged over columns too.
    """
    cfg = cfg or TrainConfig()
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 1:
        A = A[:, None]
    n = len(A)
    if n == 0:
        raise ValueError("empty dataset")
    C = _broadcast_context(C, n, model.d_c) if model.d_c else np.zeros((n, 0))
    B = np.asarray(B, dtype=np.float64).reshape(n, -1)
    params = model.parameters()

    def loss_fn(idx):
        c = Var(C[idx]) if model.d_c else None
        pred = model.output_var(c, Var(A[idx]))
        return ad.mean(ad.square(pred - B[idx]))

    return minibatch_train(params, loss_fn, n, cfg)


# ---------------------------------------------------------------------------
# dimension elimination for padded flows


@dataclass
class Eliminator:
    """Coupling layers on the padded space that push the auxiliary block to 0.

    Each layer keeps the leading ``keep`` coordinates and shifts the rest by
    ``t(c, keep)`` (the scale branch is fixed at zero, so the auxiliary
    block is moved by pure translation and the inverse error equals the
    residual).
    """

    layers: list[CouplingLayer]
    keep: int

    def forward(self, c, z) -> np.ndarray:
        for layer in self.layers:
            z = layer.forward(c, z)
        return z

    def inverse(self, c, z) -> np.ndarray:
        for layer in reversed(self.layers):
            z = layer.inverse(c, z)
        return z

    def parameters(self) -> list[Var]:
        out = []
        for layer in self.layers:
            out += layer.t_net.parameters() if isinstance(layer.t_net, MlpNet) else []
        return out


def _zero_sigma(rows_in: int, rows_out: int):
    def sigma(h):
        return np.zeros((len(h), rows_out))

    return sigma


def identity_eliminator(model: ParaCFlowModel, keep: int | None = None) -> Eliminator:
    keep = model.d_a if keep is None else keep
    zero = _zero_sigma(model.d_c + keep, model.d - keep)
    layers = [CouplingLayer(model.d, keep, model.d_c, zero, zero)]
    return Eliminator(layers, keep)


def fit_eliminator(
    model: ParaCFlowModel,
    C,
    A,
    n_layers: int = 2,
    hidden: Sequence[int] = (32,),
    cfg: TrainConfig | None = None,
    seed: int = 0,
) -> tuple[Eliminator, list[float]]:
    """Train layers driving the auxiliary block of the padded flow output to 0.

    The kept block is the first ``d_a`` output coordinates; the rest is the
    auxiliary block.
    """
    cfg = cfg or TrainConfig(batch=256, epochs=100, lr=0.01)
    A = np.asarray(A, dtype=np.float64)
    n = len(A)
    C = _broadcast_context(C, n, model.d_c) if model.d_c else np.zeros((n, 0))
    Z = paracflow_features(model, C, A)
    keep, d = model.d_a, model.d
    rng = np.random.default_rng(seed)
    zero = _zero_sigma(model.d_c + keep, d - keep)
    layers = [
        CouplingLayer(d, keep, model.d_c, zero, MlpNet.create([model.d_c + keep, *hidden, d - keep], rng))
        for _ in range(n_layers)
    ]
    elim = Eliminator(layers, keep)
    params = elim.parameters()

    def loss_fn(idx):
        c = Var(C[idx]) if model.d_c else None
        z = Var(Z[idx])
        for layer in layers:
            z = layer.forward_var(c, z)
        return ad.mean(ad.square(ad.take_cols(z, slice(keep, d))))

    trace = minibatch_train(params, loss_fn, n, cfg)
    return elim, trace


def eliminator_residual(model: ParaCFlowModel, elim: Eliminator, C, A) -> np.ndarray:
    """Euclidean norm of the auxiliary block after elimination, per sample."""
    A = np.asarray(A, dtype=np.float64)
    z = elim.forward(C, paracflow_features(model, C, A))
    return np.linalg.norm(z[:, elim.keep :], axis=1)


def invert_padded(model: ParaCFlowModel, elim: Eliminator, c, xhat) -> np.ndarray:
    """Recover the action whose features lead with ``xhat``.

    Runs exact inverses on ``(xhat, 0)`` and drops the padded coordinates.
    """
    xb, single = _batch(xhat, elim.keep)
    z = np.concatenate([xb, np.zeros((len(xb), model.d - elim.keep))], axis=1)
    cb = _broadcast_context(c, len(xb), model.d_c)
    x = model.body_inverse(cb, elim.inverse(cb, z))[:, : model.d_a]
    return x[0] if single else x


# ---------------------------------------------------------------------------
# checkpoints


def _net_state(net: MlpNet | None):
    if net is None:
        return None
    return {
        "layer_dims": net.layer_dims,
        "activation": net.activation,
        "weights": [w.value.ravel().tolist() for w in net.weights],
        "biases": [b.value.tolist() for b in net.biases],
    }


def _net_from_state(state) -> MlpNet | None:
    if state is None:
        return None
    dims = state["layer_dims"]
    weights = [Var(np.array(w, dtype=np.float64).reshape(dims[i], dims[i + 1])) for i, w in enumerate(state["weights"])]
    biases = [Var(np.array(b, dtype=np.float64)) for b in state["biases"]]
    return MlpNet(dims, weights, biases, state["activation"])


def model_to_dict(model: ParaCFlowModel) -> dict:
    layers = []
    for perm, layer in model.layers:
        if not (isinstance(layer.sigma_net, MlpNet) and isinstance(layer.t_net, MlpNet)):
            raise TypeError("only MlpNet conditioners can be checkpointed")
        layers.append(
            {
                "perm": perm.perm.tolist(),
                "split": layer.split,
                "clamp": layer.clamp,
                "sigma": _net_state(layer.sigma_net),
                "t": _net_state(layer.t_net),
            }
        )
    return {
        "schema_version": SCHEMA_VERSION,
        "dims": {"d_a": model.d_a, "d_c": model.d_c, "d": model.d, "n_out": model.n_out},
        "train_W": model.train_W,
        "seed": model.seed,
        "config": model.config,
        "W": model.W.value.ravel().tolist(),
        "layers": layers,
        "head": _net_state(model.head),
    }


def model_from_dict(doc: dict) -> ParaCFlowModel:
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValueError(f"checkpoint schema_version {version!r} is not supported (expected {SCHEMA_VERSION})")
    dims = doc["dims"]
    d_a, d_c, d = dims["d_a"], dims["d_c"], dims["d"]
    W = Var(np.array(doc["W"], dtype=np.float64).reshape(d_a, d - d_a))
    layers = []
    for entry in doc["layers"]:
        layer = CouplingLayer(
            d, entry["split"], d_c, _net_from_state(entry["sigma"]), _net_from_state(entry["t"]), entry["clamp"]
        )
        layers.append((Permutation(entry["perm"]), layer))
    return ParaCFlowModel(
        d_a, d_c, d, W, layers, _net_from_state(doc["head"]), doc["train_W"], dims["n_out"], doc["seed"], doc["config"]
    )


def save_checkpoint(model: ParaCFlowModel, path) -> None:
    """Write the model as one JSON document (atomic rename)."""
    text = json.dumps(model_to_dict(model))
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def load_checkpoint(path) -> ParaCFlowModel:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"corrupted checkpoint {path}: {exc}") from exc
    try:
        return model_from_dict(doc)
    except (KeyError, TypeError) as exc:
        raise ValueError(f"corrupted checkpoint {path}: missing or malformed field {exc}") from exc
