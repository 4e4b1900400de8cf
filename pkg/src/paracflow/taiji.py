"""The "Taiji" parametric rotation field and experiments that learn it.

``f_y`` rotates a point at radius rho by ``y * arccos(min(rho, 1))``: the
unit disc is twisted, everything outside it stays put.  Because the twist
angle is additive in ``y``, ``f_a o f_b = f_{a+b}``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .flows import ParaCFlowModel, build_paracflow, split_index, train_mse
from .numkit import MlpNet, TrainConfig, Var, fd_jacobian_batch, minibatch_train
from .numkit import autodiff as ad

VECTOR_DIM = 100
VECTOR_NOISE_VAR = 0.16


class RegionLabel(Enum):
    black = "black"
    white = "white"
    yellow = "yellow"


def region_labels(x) -> np.ndarray:
    """0 = black (x2 > 0, rho <= 1), 1 = white (x2 <= 0, rho <= 1), 2 = yellow."""
    x = np.atleast_2d(x)
    rho = np.hypot(x[:, 0], x[:, 1])
    return np.where(rho > 1, 2, np.where(x[:, 1] > 0, 0, 1))


def region_label(x) -> RegionLabel:
    return list(RegionLabel)[int(region_labels(x)[0])]


def _polar(x):
    x = np.asarray(x, dtype=np.float64)
    return np.hypot(x[..., 0], x[..., 1]), np.arctan2(x[..., 1], x[..., 0])


def taiji_apply(y, x) -> np.ndarray:
    """f_y(x); ``y`` scalar or per-row, ``x`` of shape (2,) or (n, 2)."""
    x = np.asarray(x, dtype=np.float64)
    rho, theta = _polar(x)
    twisted = theta + np.asarray(y, dtype=np.float64) * np.arccos(np.minimum(rho, 1.0))
    out = np.stack([rho * np.cos(twisted), rho * np.sin(twisted)], axis=-1)
    # exact identity where the twist vanishes
    still = (rho >= 1.0) | (np.asarray(y) == 0)
    return np.where(still[..., None], x, out)


def taiji_dy(y, x) -> tuple[np.ndarray, np.ndarray]:
    """Analytic d f_y(x) / d y and a flag marking points on the unit circle.

    The map is not differentiable at rho == 1; the value returned there is the
    interior one-sided limit (zero) and the flag is set.
    """
    x = np.asarray(x, dtype=np.float64)
    rho, theta = _polar(x)
    ang = np.arccos(np.minimum(rho, 1.0))
    tt = theta + np.asarray(y, dtype=np.float64) * ang
    d = np.stack([-rho * np.sin(tt) * ang, rho * np.cos(tt) * ang], axis=-1)
    return d, np.isclose(rho, 1.0, rtol=0, atol=1e-12)


def taiji_dx(y, x) -> np.ndarray:
    """Analytic d f_y(x) / d x, shape (..., 2, 2); valid off the unit circle."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    yb = np.broadcast_to(np.asarray(y, dtype=np.float64), (len(xb),))
    rho, theta = _polar(xb)
    inside = rho < 1
    phi = yb * np.arccos(np.minimum(rho, 1.0))
    c, s = np.cos(phi), np.sin(phi)
    R = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
    f = taiji_apply(yb, xb)
    perp = np.stack([-f[:, 1], f[:, 0]], -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        # grad phi = y * d/drho arccos(rho) * x / rho
        gscale = np.where(inside & (rho > 0), -yb / np.sqrt(1 - np.minimum(rho, 0.999999999) ** 2) / rho, 0.0)
    grad_phi = gscale[:, None] * xb
    J = R + perp[:, :, None] * grad_phi[:, None, :]
    J = np.where(inside[:, None, None], J, np.eye(2))
    return J[0] if single else J


@dataclass
class TaijiDataset:
    """Inputs ``x`` (n, 2), parameters ``y`` (n,) or (n, 100), targets (n, 2)."""

    x: np.ndarray
    y: np.ndarray
    target: np.ndarray
    mode: str

    def __len__(self) -> int:
        return len(self.x)

    @property
    def effective_y(self) -> np.ndarray:
        return self.y if self.y.ndim == 1 else self.y.mean(axis=1)

    @property
    def context(self) -> np.ndarray:
        return self.y[:, None] if self.y.ndim == 1 else self.y


def gen_taiji_dataset(n: int, seed: int, mode: str = "scalar") -> TaijiDataset:
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, size=(n, 2))
    base = rng.uniform(0.0, 1.0, size=n)
    if mode == "scalar":
        y = base
        eff = y
    elif mode == "vector100":
        y = base[:, None] + np.sqrt(VECTOR_NOISE_VAR) * rng.standard_normal((n, VECTOR_DIM))
        eff = y.mean(axis=1)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return TaijiDataset(x, y, taiji_apply(eff, x), mode)


@dataclass
class TaijiConfig:
    n_layers: int = 6
    pad: int = 1
    hidden: int | None = None  # default: max(32, 2 * conditioner input width)
    epochs: int = 150
    batch: int = 64
    lr: float = 0.005
    lr_decay: float = 0.97
    seed: int = 0


def conditioner_width(cond_in: int) -> int:
    return max(32, 2 * cond_in)


def train_taiji_flow(data: TaijiDataset, cfg: TaijiConfig | None = None) -> tuple[ParaCFlowModel, list[float]]:
    """Zero-padded 6-layer flow; loss on the first two output coordinates."""
    cfg = cfg or TaijiConfig()
    m = data.context.shape[1]
    d = 2 + cfg.pad

    hidden = cfg.hidden or conditioner_width(m + split_index(2, d))
    model = build_paracflow(
        2, m, d, cfg.n_layers, [hidden], cfg.seed, head_hidden=None, zero_pad=True, identity_init=True, n_out=2
    )
    trace = train_mse(
        model,
        data.context,
        data.x,
        data.target,
        TrainConfig(batch=cfg.batch, epochs=cfg.epochs, lr=cfg.lr, seed=cfg.seed, lr_decay=cfg.lr_decay),
    )
    return model, trace


def model_apply(model: ParaCFlowModel, y, x) -> np.ndarray:
    """f-hat_y(x): pad, run the flow, keep the first two coordinates."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    ctx = np.asarray(y, dtype=np.float64)
    if ctx.ndim == 0:
        ctx = np.full((len(x), model.d_c), float(ctx))
    elif ctx.ndim == 1 and model.d_c == 1 and len(ctx) == len(x):
        ctx = ctx[:, None]
    return model.predict(ctx, x)


def compose_model(model: ParaCFlowModel, y, x, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    out = np.atleast_2d(x).copy()
    for _ in range(n):
        out = model_apply(model, y, out)
    return out[0] if single else out


def interior_grid(points: int = 200, radius: float = 1.0) -> np.ndarray:
    ax = np.linspace(-1.0, 1.0, points)
    X = np.stack(np.meshgrid(ax, ax, indexing="ij"), -1).reshape(-1, 2)
    return X[np.hypot(X[:, 0], X[:, 1]) < radius]


def region_agreement(model: ParaCFlowModel, y: float = 1.0, n: int = 2, points: int = 200) -> float:
    """Share of interior grid points whose n-fold image lands in the same
    region as under the true f_{n*y}."""
    X = interior_grid(points)
    pred = compose_model(model, y, X, n)
    truth = taiji_apply(n * y, X)
    return float(np.mean(region_labels(pred) == region_labels(truth)))


def heldout_rmse(model: ParaCFlowModel, data: TaijiDataset, max_rho: float = 0.9) -> float:
    rho = np.hypot(data.x[:, 0], data.x[:, 1])
    keep = rho < max_rho
    pred = model.predict(data.context[keep], data.x[keep])
    return float(np.sqrt(np.mean(np.sum((pred - data.target[keep]) ** 2, axis=1))))


@dataclass
class DerivativeReport:
    x: np.ndarray
    dx_model: np.ndarray  # (n, 2, 2)
    dx_true: np.ndarray
    dy_model: np.ndarray  # (n, 2)
    dy_true: np.ndarray
    circle_distance: np.ndarray
    excluded: np.ndarray
    median_rel_error: float
    median_angle_error: float
    median_magnitude_error: float

    def rows(self):
        for i in range(len(self.x)):
            yield [
                *self.x[i],
                *self.dx_model[i].ravel(),
                *self.dx_true[i].ravel(),
                *self.dy_model[i],
                *self.dy_true[i],
                self.circle_distance[i],
                int(self.excluded[i]),
            ]


DERIVATIVE_COLUMNS = [
    "x1", "x2",
    "dfh1_dx1", "dfh1_dx2", "dfh2_dx1", "dfh2_dx2",
    "df1_dx1", "df1_dx2", "df2_dx1", "df2_dx2",
    "dfh1_dy", "dfh2_dy", "df1_dy", "df2_dy",
    "circle_distance", "excluded",
]


def derivative_report(
    model: ParaCFlowModel,
    X,
    y: float = 1.0,
    annulus: float = 0.1,
    max_rho: float | None = None,
    h: float = 1e-5,
) -> DerivativeReport:
    """Finite-difference model derivatives against the analytic field at ``y``.

    Summary statistics skip points with ``|rho - 1| <= annulus`` (and, when
    given, points with ``rho >= max_rho``).
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = len(X)

    def fx(Z):
        return model_apply(model, y, Z)

    def fy(Yc):
        return model.predict(Yc, X)

    dx_model = fd_jacobian_batch(fx, X, h)
    ctx = np.full((n, 1), float(y))
    dy_model = fd_jacobian_batch(fy, ctx, h)[:, :, 0]
    dx_true = taiji_dx(y, X)
    dy_true, _ = taiji_dy(y, X)
    rho = np.hypot(X[:, 0], X[:, 1])
    dist = np.abs(rho - 1.0)
    excluded = dist <= annulus
    if max_rho is not None:
        excluded |= rho >= max_rho
    keep = ~excluded

    Jm = np.concatenate([dx_model, dy_model[:, :, None]], axis=2)
    Jt = np.concatenate([dx_true, dy_true[:, :, None]], axis=2)
    rel = np.linalg.norm((Jm - Jt).reshape(n, -1), axis=1) / np.maximum(np.linalg.norm(Jt.reshape(n, -1), axis=1), 1e-12)

    # arrow comparisons over the columns of the x-Jacobian and the y-derivative
    arrows_m = np.concatenate([dx_model.transpose(0, 2, 1), dy_model[:, None, :]], axis=1)
    arrows_t = np.concatenate([dx_true.transpose(0, 2, 1), dy_true[:, None, :]], axis=1)
    norm_m = np.linalg.norm(arrows_m, axis=2)
    norm_t = np.linalg.norm(arrows_t, axis=2)
    cosang = np.sum(arrows_m * arrows_t, axis=2) / np.maximum(norm_m * norm_t, 1e-12)
    angle = np.arccos(np.clip(cosang, -1, 1))
    mag = np.abs(norm_m - norm_t) / np.maximum(norm_t, 1e-12)
    informative = norm_t > 1e-3

    def med(v, mask):
        vals = v[mask]
        return float(np.median(vals)) if vals.size else float("nan")

    return DerivativeReport(
        X, dx_model, dx_true, dy_model, dy_true, dist, excluded,
        med(rel, keep),
        med(angle, keep[:, None] & informative),
        med(mag, keep[:, None] & informative),
    )


# ---------------------------------------------------------------------------
# baselines for the 100-dimensional parameter task


@dataclass
class ResNetRegressor:
    """Concatenates (context, x) as input; appends ``x`` to every hidden output."""

    layers: list[MlpNet]
    skip_dim: int
    activation: str = "tanh"

    @classmethod
    def create(cls, in_dim: int, skip_dim: int, hidden: Sequence[int], out_dim: int, rng, activation="tanh"):
        layers = []
        width = in_dim
        for h in hidden:
            layers.append(MlpNet.create([width, h], rng, activation))
            width = h + skip_dim
        layers.append(MlpNet.create([width, out_dim], rng, activation))
        return cls(layers, skip_dim, activation)

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def num_params(self) -> int:
        return sum(layer.num_params() for layer in self.layers)

    def hidden_outputs(self, h: Var, skip: Var) -> list[Var]:
        act = ad.tanh if self.activation == "tanh" else ad.relu
        outs = []
        for layer in self.layers[:-1]:
            h = ad.concat([act(layer.apply(h)), skip])
            outs.append(h)
        return outs

    def apply(self, h: Var, skip: Var) -> Var:
        outs = self.hidden_outputs(h, skip)
        return self.layers[-1].apply(outs[-1] if outs else h)


@dataclass
class ConcatMlp:
    net: MlpNet

    def parameters(self):
        return self.net.parameters()

    def num_params(self) -> int:
        return self.net.num_params()

    def apply(self, h: Var, skip: Var) -> Var:
        return self.net.apply(h)


def _train_concat(model, ctx: np.ndarray, x: np.ndarray, target: np.ndarray, cfg: TrainConfig):
    inputs = np.concatenate([ctx, x], axis=1)

    def loss_fn(idx):
        pred = model.apply(Var(inputs[idx]), Var(x[idx]))
        return ad.mean(ad.square(pred - target[idx]))

    return minibatch_train(model.parameters(), loss_fn, len(x), cfg)


def _predict_concat(model, ctx, x) -> np.ndarray:
    return model.apply(Var(np.concatenate([ctx, x], axis=1)), Var(x)).value


def coverage(pred: np.ndarray, cells: int = 40, radius: float = 1.0) -> float:
    """Share of interior cells of a ``cells`` x ``cells`` grid on [-1, 1]^2
    containing at least one predicted point."""
    edges = np.linspace(-1.0, 1.0, cells + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    cx, cy = np.meshgrid(centers, centers, indexing="ij")
    interior = np.hypot(cx, cy) < radius
    ix = np.searchsorted(edges, pred[:, 0], side="right") - 1
    iy = np.searchsorted(edges, pred[:, 1], side="right") - 1
    ok = (ix >= 0) & (ix < cells) & (iy >= 0) & (iy < cells)
    hit = np.zeros((cells, cells), dtype=bool)
    hit[ix[ok], iy[ok]] = True
    return float(hit[interior].mean())


@dataclass
class ComparisonResult:
    coverage: dict[str, dict[float, float]]
    grids: dict[str, dict[float, np.ndarray]]
    inputs: np.ndarray
    params: dict[str, int]
    losses: dict[str, list[float]] = field(default_factory=dict)


def run_baseline_comparison(
    seed: int,
    n: int = 3000,
    epochs: int = 200,
    ys: Sequence[float] = (0.0, 0.5, 1.0),
    grid_points: int = 150,
    cells: int = 40,
) -> ComparisonResult:
    """Para-CFlow vs MLP (128, 64, 32) vs Resnet on the 100-parameter task.

    All models share the data and the optimiser budget.
    """
    data = gen_taiji_dataset(n, seed, "vector100")
    rng = np.random.default_rng(seed + 1)
    m = data.context.shape[1]
    cfg = TrainConfig(batch=64, epochs=epochs, lr=0.01, seed=seed)

    flow, flow_loss = train_taiji_flow(
        data, TaijiConfig(epochs=epochs, lr=0.01, lr_decay=1.0, seed=seed)
    )
    mlp = ConcatMlp(MlpNet.create([m + 2, 128, 64, 32, 2], rng))
    mlp_loss = _train_concat(mlp, data.context, data.x, data.target, cfg)
    resnet = ResNetRegressor.create(m + 2, 2, (128, 64, 32), 2, rng)
    res_loss = _train_concat(resnet, data.context, data.x, data.target, cfg)

    ax = np.linspace(-1.0, 1.0, grid_points)
    X = np.stack(np.meshgrid(ax, ax, indexing="ij"), -1).reshape(-1, 2)
    cov: dict[str, dict[float, float]] = {"paracflow": {}, "mlp": {}, "resnet": {}}
    grids: dict[str, dict[float, np.ndarray]] = {"paracflow": {}, "mlp": {}, "resnet": {}}
    for yv in ys:
        ctx = np.full((len(X), m), float(yv))
        preds = {
            "paracflow": flow.predict(ctx, X),
            "mlp": _predict_concat(mlp, ctx, X),
            "resnet": _predict_concat(resnet, ctx, X),
        }
        for name, p in preds.items():
            grids[name][yv] = p
            cov[name][yv] = coverage(p, cells)
    params = {"paracflow": flow.num_params(), "mlp": mlp.num_params(), "resnet": resnet.num_params()}
    losses = {"paracflow": flow_loss, "mlp": mlp_loss, "resnet": res_loss}
    return ComparisonResult(cov, grids, X, params, losses)


def write_prediction_grid(path, X: np.ndarray, pred: np.ndarray) -> None:
    from .io import write_csv

    labels = [lab.value for lab in RegionLabel]
    regions = region_labels(X)
    rows = [[X[i, 0], X[i, 1], pred[i, 0], pred[i, 1], labels[regions[i]]] for i in range(len(X))]
    write_csv(path, ["x1", "x2", "fhat1", "fhat2", "region"], rows)
