"""Grid-checked factorisation of near-identity diffeomorphisms.

A near-identity map ``f`` on R^d splits as ``f = g o h`` where ``h`` only
changes coordinate ``i`` (to ``f_i``) and ``g`` leaves coordinate ``i`` alone.
Repeating the split on ``g`` peels off one coordinate per level, giving ``d``
single-coordinate factors.  Inverses of the scalar maps ``s -> f_i(.., s, ..)``
come from a bracketed Newton iteration, which is safe because the partial
derivative stays close to 1.

All sup-norms here are maxima over a finite grid; results carry the grid
they were measured on.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .numkit import fd_jacobian_batch
from .numkit import MlpNet, TrainConfig, Var, minibatch_train
from .numkit import autodiff as ad
from .flows import CouplingLayer, Permutation

ROOT_TOL = 1e-12
FD_STEP = 1e-6


class PreconditionError(ValueError):
    """Input map is too far from the identity (or not monotone) to split."""


@dataclass
class GridSpec:
    lower: Sequence[float]
    upper: Sequence[float]
    points: int = 50

    def __post_init__(self):
        if len(self.lower) != len(self.upper):
            raise ValueError("lower and upper bounds need the same length")
        if self.points < 2:
            raise ValueError("need at least 2 points per axis")
        if not (np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper))):
            raise ValueError("grid bounds must be finite")

    @property
    def dim(self) -> int:
        return len(self.lower)

    @classmethod
    def cube(cls, d: int, half_width: float, points: int = 50) -> "GridSpec":
        return cls([-half_width] * d, [half_width] * d, points)

    def points_array(self) -> np.ndarray:
        axes = [np.linspace(lo, hi, self.points) for lo, hi in zip(self.lower, self.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def to_dict(self) -> dict:
        return {"lower": list(map(float, self.lower)), "upper": list(map(float, self.upper)), "points": self.points}


@dataclass
class SmoothMap:
    """Vectorised map R^d -> R^d, equal to the identity outside ``support``.

    ``fn`` takes an (n, d) array.  ``jac`` (optional) returns (n, d, d);
    without it Jacobians fall back to central differences.
    """

    dim: int
    fn: Callable[[np.ndarray], np.ndarray]
    jac: Callable[[np.ndarray], np.ndarray] | None = None
    support: tuple[np.ndarray, np.ndarray] | None = None

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            return self.fn(x[None, :])[0]
        return self.fn(x)

    def jacobian(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.jac is not None:
            return self.jac(x)
        return fd_jacobian_batch(self.fn, x, FD_STEP)

    @classmethod
    def identity(cls, d: int) -> "SmoothMap":
        return cls(d, lambda x: np.array(x, dtype=np.float64, copy=True), lambda x: np.broadcast_to(np.eye(d), (len(x), d, d)).copy())


@dataclass
class SingleCoordinateFactor:
    """A map changing only coordinate ``coord`` to ``tau(x)``."""

    dim: int
    coord: int
    tau: Callable[[np.ndarray], np.ndarray]

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = x[None, :] if single else x
        out = xb.copy()
        out[:, self.coord] = self.tau(xb)
        return out[0] if single else out

    def as_map(self) -> SmoothMap:
        return SmoothMap(self.dim, self.__call__)

    def partial(self, x) -> np.ndarray:
        """d tau / d x_coord by central differences."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        xp, xm = x.copy(), x.copy()
        xp[:, self.coord] += FD_STEP
        xm[:, self.coord] -= FD_STEP
        return (self.tau(xp) - self.tau(xm)) / (2 * FD_STEP)


def near_identity_delta(f: SmoothMap, grid: GridSpec) -> float:
    """max over the grid of max(|f(x) - x|_inf, max_ij |Df(x) - I|_ij)."""
    X = grid.points_array()
    c0 = np.max(np.abs(f(X) - X))
    J = f.jacobian(X)
    c1 = np.max(np.abs(J - np.eye(f.dim)))
    return float(max(c0, c1))


def practical_threshold(d: int) -> float:
    if d < 2:
        return 0.2
    return min(0.2, 1.0 / (2 * (d - 1)))


# ---------------------------------------------------------------------------
# scalar inversion


def _coord_fn(f: Callable, X: np.ndarray, i: int) -> Callable[[np.ndarray], np.ndarray]:
    def fi(s):
        Z = X.copy()
        Z[:, i] = s
        return f(Z)[:, i]

    return fi


def monotone_inverse(
    fi: Callable[[np.ndarray], np.ndarray],
    target: np.ndarray,
    bracket: float,
    tol: float = ROOT_TOL,
    max_iter: int = 100,
) -> np.ndarray:
    """Solve ``fi(s) = target`` elementwise for increasing scalar maps.

    Starts from ``s = target`` inside ``[target - bracket, target + bracket]``
    (valid whenever ``|fi(s) - s| < bracket``), takes Newton steps with a
    finite-difference slope and bisects whenever a step leaves the bracket.
    The bracket is only verified if the iteration fails to converge.
    """
    target = np.asarray(target, dtype=np.float64)
    lo = target - bracket
    hi = target + bracket
    s = target.copy()
    h = FD_STEP
    for _ in range(max_iter):
        r = fi(s) - target
        done = np.abs(r) <= tol
        if done.all():
            return s
        lo = np.where(r < 0, s, lo)
        hi = np.where(r > 0, s, hi)
        slope = (fi(s + h) - target - r) / h
        with np.errstate(divide="ignore", invalid="ignore"):
            step = s - r / slope
        ok = np.isfinite(step) & (step > lo) & (step < hi)
        s = np.where(done, s, np.where(ok, step, 0.5 * (lo + hi)))
    r = fi(s) - target
    if np.max(np.abs(r)) > 1e3 * tol:
        lo_bad = fi(target - bracket) > target
        hi_bad = fi(target + bracket) < target
        if lo_bad.any() or hi_bad.any():
            raise PreconditionError("inverse lies outside the search bracket; map is too far from the identity")
        raise PreconditionError(f"root finding stalled, residual {np.max(np.abs(r)):.3e}")
    return s


# ---------------------------------------------------------------------------
# splitting


def _check_monotone(f: SmoothMap, i: int, X: np.ndarray) -> None:
    fi = _coord_fn(f, X, i)
    slope = (fi(X[:, i] + FD_STEP) - fi(X[:, i] - FD_STEP)) / (2 * FD_STEP)
    if np.any(slope <= 0):
        raise PreconditionError(f"coordinate {i} map is not increasing on the grid (min slope {slope.min():.3e})")


def split_coordinate(f: SmoothMap, i: int, bracket: float = 1.0) -> tuple[SmoothMap, SmoothMap]:
    """Write ``f = g o h``; ``h`` alters only coordinate ``i``, ``g`` keeps it."""

    def h_fn(X):
        out = X.copy()
        out[:, i] = f(X)[:, i]
        return out

    def g_fn(X):
        s = monotone_inverse(_coord_fn(f, X, i), X[:, i], bracket)
        Z = X.copy()
        Z[:, i] = s
        out = f(Z)
        # coordinate i is x_i by construction; store it exactly
        out[:, i] = X[:, i]
        return out

    h = SmoothMap(f.dim, h_fn, support=f.support)
    g = SmoothMap(f.dim, g_fn, support=f.support)
    return g, h


def split_last_coordinate(f: SmoothMap, grid: GridSpec | None = None, bracket: float = 1.0):
    """``f = g o h`` with ``h = (x, f_x(y))`` and ``g`` keeping the last coordinate."""
    if grid is not None:
        _check_monotone(f, f.dim - 1, grid.points_array())
    return split_coordinate(f, f.dim - 1, bracket)


@dataclass
class LevelReport:
    level: int
    coord: int
    delta: float
    threshold: float
    binding: bool


@dataclass
class FactorizationReport:
    grid: dict
    levels: list[LevelReport] = field(default_factory=list)
    reconstruction_error: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def decompose_near_identity(
    f: SmoothMap,
    grid: GridSpec,
    threshold: float | None = None,
    report: FactorizationReport | None = None,
) -> list[SingleCoordinateFactor]:
    """Factor ``f`` into ``d`` single-coordinate maps.

    The result is ordered so that ``compose_factors`` (rightmost applied
    first) reproduces ``f``: element ``j`` alters coordinate ``j``, and the
    factor on the last coordinate is applied first.
    """
    d = f.dim
    threshold = practical_threshold(d) if threshold is None else threshold
    X = grid.points_array()
    rest = f
    peeled: list[SingleCoordinateFactor] = []
    for level, i in enumerate(range(d - 1, 0, -1), start=1):
        delta = near_identity_delta(rest, grid)
        if report is not None:
            report.levels.append(LevelReport(level, i, delta, threshold, delta > 0.8 * threshold))
        if delta >= threshold:
            raise PreconditionError(
                f"level {level} (coordinate {i}): measured delta {delta:.4g} >= threshold {threshold:.4g}"
            )
        _check_monotone(rest, i, X)
        g, h = split_coordinate(rest, i)
        peeled.append(_factor_of(h, i))
        rest = g
    delta = near_identity_delta(rest, grid)
    if report is not None:
        report.levels.append(LevelReport(d, 0, delta, threshold, delta > 0.8 * threshold))
    if delta >= threshold:
        raise PreconditionError(f"level {d} (coordinate 0): measured delta {delta:.4g} >= threshold {threshold:.4g}")
    _check_monotone(rest, 0, X)
    factors = [_factor_of(rest, 0)] + peeled[::-1]
    if report is not None:
        composed = compose_factors(factors)
        report.reconstruction_error = float(np.max(np.abs(composed(X) - f(X))))
    return factors


def _factor_of(m: SmoothMap, i: int) -> SingleCoordinateFactor:
    return SingleCoordinateFactor(m.dim, i, lambda X: m(X)[:, i])


def compose_factors(factors: Sequence, dim: int | None = None) -> SmoothMap:
    """``factors[0] o factors[1] o ... o factors[-1]``."""
    dims = {fac.dim for fac in factors}
    if dim is not None:
        dims.add(dim)
    if len(dims) > 1:
        raise ValueError(f"factors disagree on dimension: {sorted(dims)}")
    if not factors:
        if dim is None:
            raise ValueError("empty composition needs an explicit dim")
        return SmoothMap.identity(dim)
    d = dims.pop()

    def fn(X):
        for fac in reversed(factors):
            X = fac(X)
        return X

    def jac(X):
        J = np.broadcast_to(np.eye(d), (len(X), d, d)).copy()
        for fac in reversed(factors):
            Jf = fac.as_map().jacobian(X) if not isinstance(fac, SmoothMap) else fac.jacobian(X)
            J = Jf @ J
            X = fac(X)
        return J

    return SmoothMap(d, fn, jac)


# ---------------------------------------------------------------------------
# single-coordinate maps through one padded dimension


def analytic_padded_pipeline(tau: SingleCoordinateFactor, bracket: float = 1.0):
    """Exact three-step construction on width d+1 for a last-coordinate ``tau``.

    Returns (layer1, swap, layer3):
      layer1 writes tau_d(x) into the padded slot,
      swap exchanges the last two coordinates,
      layer3 shifts the old x_d to zero using the inverse of tau_d in x_d.
    """
    d = tau.dim
    if tau.coord != d - 1:
        raise ValueError("pipeline expects a factor on the last coordinate")

    def t1(h):
        return tau.tau(h)[:, None]

    def t3(h):
        # h = (x_<d, u); solve tau_d(x_<d, s) = u for s
        prefix = h[:, : d - 1]
        u = h[:, d - 1]

        def fi(s):
            return tau.tau(np.column_stack([prefix, s]))

        return -monotone_inverse(fi, u, bracket)[:, None]

    def zero(h):
        return np.zeros((len(h), 1))

    layer1 = CouplingLayer(d + 1, d, 0, zero, t1)
    layer3 = CouplingLayer(d + 1, d, 0, zero, t3)
    swap = Permutation(list(range(d - 1)) + [d, d - 1])
    return layer1, swap, layer3


@dataclass
class PaddedFlow:
    """Coupling stack on width d+1 approximating a last-coordinate factor."""

    dim: int
    layer1: CouplingLayer
    swap: Permutation
    layer3: CouplingLayer
    sup_error: float = float("nan")
    pad_error: float = float("nan")
    converged: bool = False

    def forward_padded(self, X) -> np.ndarray:
        Z = np.concatenate([np.asarray(X, float), np.zeros((len(X), 1))], axis=1)
        return self.layer3.forward(None, self.swap.apply(self.layer1.forward(None, Z)))

    def __call__(self, X) -> np.ndarray:
        """pi_d o flow o iota_d."""
        return self.forward_padded(X)[:, : self.dim]


def _fit_scalar(net: MlpNet, H: np.ndarray, y: np.ndarray, cfg: TrainConfig) -> list[float]:
    params = net.parameters()
    Y = y.reshape(-1, 1)

    def loss_fn(idx):
        return ad.mean(ad.square(net.apply(Var(H[idx])) - Y[idx]))

    return minibatch_train(params, loss_fn, len(H), cfg)


def approximate_single_coordinate(
    tau: SingleCoordinateFactor,
    grid: GridSpec,
    hidden: Sequence[int] = (64,),
    cfg: TrainConfig | None = None,
    target_eps: float = 1e-2,
    seed: int = 0,
    n_train: int = 2000,
) -> PaddedFlow:
    """Train the padded three-layer flow for ``tau`` by regressing its shifts.

    The first shift net learns ``tau_d``; the third learns ``-tau_d^{-1}``
    evaluated on the image ``(x_<d, tau_d(x))``.  Scale nets stay at zero.
    """
    d = tau.dim
    if tau.coord != d - 1:
        raise ValueError("expects a factor on the last coordinate")
    cfg = cfg or TrainConfig(batch=256, epochs=1500, lr=0.01, lr_decay=0.997)
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(grid.lower, float), np.asarray(grid.upper, float)
    X = np.concatenate([grid.points_array(), rng.uniform(lo, hi, size=(n_train, d))])
    Xg = grid.points_array()
    _check_monotone(tau.as_map(), d - 1, Xg)

    u = tau.tau(X)
    net1 = MlpNet.create([d, *hidden, 1], rng)
    _fit_scalar(net1, X, u, cfg)

    # image points (x_<d, u) and the x_d that produced them
    H3 = np.column_stack([X[:, : d - 1], u])
    net3 = MlpNet.create([d, *hidden, 1], rng)
    _fit_scalar(net3, H3, -X[:, d - 1], cfg)

    zero_sigma = MlpNet.zeros([d, 1])
    layer1 = CouplingLayer(d + 1, d, 0, zero_sigma, net1)
    layer3 = CouplingLayer(d + 1, d, 0, MlpNet.zeros([d, 1]), net3)
    swap = Permutation(list(range(d - 1)) + [d, d - 1])
    flow = PaddedFlow(d, layer1, swap, layer3)
    out = flow.forward_padded(Xg)
    flow.sup_error = float(np.max(np.abs(out[:, :d] - tau(Xg))))
    flow.pad_error = float(np.max(np.abs(out[:, d])))
    flow.converged = flow.sup_error <= target_eps
    return flow


# ---------------------------------------------------------------------------
# random test maps


def bump(t) -> np.ndarray:
    """C-infinity bump on (-1, 1), equal to 1 at 0."""
    t = np.asarray(t, dtype=np.float64)
    out = np.zeros_like(t)
    inside = np.abs(t) < 1
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - t[inside] ** 2))
    return out


def random_near_identity_map(d: int, delta: float, seed: int, grid: GridSpec | None = None) -> SmoothMap:
    """``x + eps * bump(x) * sin(A x + b)`` supported on [-1, 1]^d.

    ``eps`` is set so the grid-measured delta equals ``delta``.
    """
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(d, d))
    b = rng.uniform(0.0, 2 * np.pi, size=d)

    def raw(X):
        return np.prod(bump(X), axis=1)[:, None] * np.sin(X @ A.T + b)

    grid = grid or GridSpec.cube(d, 1.2, 50 if d <= 2 else 30)
    unit = near_identity_delta(SmoothMap(d, lambda X: X + raw(X)), grid)
    eps = delta / unit
    return SmoothMap(d, lambda X: X + eps * raw(X), support=(-np.ones(d), np.ones(d)))


def random_monotone_factor(d: int, seed: int) -> SingleCoordinateFactor:
    """Last-coordinate factor ``x_d + a tanh(b x_d + w.x_<d + s)`` with |a b| <= 1/2."""
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.2, 1.0)
    b = rng.uniform(-0.5, 0.5) / a
    w = rng.normal(size=d - 1)
    s = rng.normal()

    def tau(X):
        return X[:, d - 1] + a * np.tanh(b * X[:, d - 1] + X[:, : d - 1] @ w + s)

    return SingleCoordinateFactor(d, d - 1, tau)
