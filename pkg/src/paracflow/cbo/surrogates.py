"""Neural surrogate families and their 5-member ensembles.

Families:
  paracflow   Para-CFlow: a lifted, context-conditioned coupling flow + head
  mlp         MLP on the concatenation (c, a)
  mlp_ascend  c and a linearly lifted to width max(5, d_c), then an MLP
  resnet      MLP on (c, a) that appends a to every hidden output
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
import numpy as np

from ..flows import ParaCFlowModel, build_paracflow, split_index
from ..numkit import MlpNet, StateError, TrainConfig, Var, minibatch_train
from ..numkit import autodiff as ad
from ..taiji import ResNetRegressor
from .benchmarks import BOX

FAMILIES = ("paracflow", "mlp", "mlp_ascend", "resnet")
ENSEMBLE_SIZE = 5
N_FLOWS = 3

# (hidden layers, hidden nodes[, flows]) per context width
TABLE_SHAPES = {
    5: {"paracflow": (1, 64, 3), "mlp": (2, 32), "mlp_ascend": (2, 32), "resnet": (2, 32)},
    10: {"paracflow": (0, 128, 3), "mlp": (2, 64), "mlp_ascend": (2, 64), "resnet": (2, 64)},
    20: {"paracflow": (1, 64, 3), "mlp": (3, 64), "mlp_ascend": (3, 64), "resnet": (3, 64)},
}
TABLE_PARAMS = {
    5: {"paracflow": 1428, "mlp": 1313, "mlp_ascend": 1481, "resnet": 1346},
    10: {"paracflow": 5337, "mlp": 4993, "mlp_ascend": 5669, "resnet": 5058},
    20: {"paracflow": 12723, "mlp": 9793, "mlp_ascend": 11469, "resnet": 9922},
}


def nearest_table(d_c: int) -> int:
    return min(TABLE_SHAPES, key=lambda k: (abs(k - d_c), k))


def paracflow_param_count(d_c: int, d: int, layers: int, nodes: int, n_flows: int = N_FLOWS, d_a: int = 1) -> int:
    split = split_index(d_a, d)
    dims = [d_c + split] + [nodes] * layers + [d - split]
    cond = sum((dims[i] + 1) * dims[i + 1] for i in range(len(dims) - 1))
    head = (d + 1) * nodes + (nodes + 1)
    return 2 * n_flows * cond + d_a * (d - d_a) + head


def paracflow_width(d_c: int, max_width: int = 32) -> int:
    """Flow width whose parameter count sits closest to the reference table."""
    key = nearest_table(d_c)
    layers, nodes, flows = TABLE_SHAPES[key]["paracflow"]
    target = TABLE_PARAMS[key]["paracflow"]
    return min(range(2, max_width + 1), key=lambda d: (abs(paracflow_param_count(d_c, d, layers, nodes, flows) - target), d))


class Regressor:
    def parameters(self) -> list[Var]:
        raise NotImplementedError

    def output_var(self, c: Var, a: Var) -> Var:
        raise NotImplementedError

    def num_params(self) -> int:
        return int(sum(p.value.size for p in self.parameters()))

    def predict(self, C: np.ndarray, A: np.ndarray) -> np.ndarray:
        return self.output_var(Var(C), Var(A)).value[:, 0]


class ParaCFlowRegressor(Regressor):
    def __init__(self, model: ParaCFlowModel):
        self.model = model

    def parameters(self):
        return self.model.parameters()

    def output_var(self, c, a):
        return self.model.output_var(c, a)


class MlpRegressor(Regressor):
    def __init__(self, net: MlpNet):
        self.net = net

    def parameters(self):
        return self.net.parameters()

    def output_var(self, c, a):
        return self.net.apply(ad.concat([c, a]))


class MlpAscendRegressor(Regressor):
    def __init__(self, lift_c: MlpNet, lift_a: MlpNet, net: MlpNet):
        self.lift_c, self.lift_a, self.net = lift_c, lift_a, net

    def parameters(self):
        return self.lift_c.parameters() + self.lift_a.parameters() + self.net.parameters()

    def output_var(self, c, a):
        return self.net.apply(ad.concat([self.lift_c.apply(c), self.lift_a.apply(a)]))


class ResnetSurrogate(Regressor):
    def __init__(self, net: ResNetRegressor):
        self.net = net

    def parameters(self):
        return self.net.parameters()

    def output_var(self, c, a):
        return self.net.apply(ad.concat([c, a]), a)


def build_member(family: str, d_c: int, seed: int, width: int | None = None) -> Regressor:
    if family not in FAMILIES:
        raise ValueError(f"unknown surrogate family {family!r}")
    shape = TABLE_SHAPES[nearest_table(d_c)][family]
    rng = np.random.default_rng(seed)
    if family == "paracflow":
        layers, nodes, flows = shape
        d = width or paracflow_width(d_c)
        model = build_paracflow(1, d_c, d, flows, [nodes] * layers, seed, head_hidden=[nodes])
        return ParaCFlowRegressor(model)
    layers, nodes = shape
    hidden = [nodes] * layers
    if family == "mlp":
        return MlpRegressor(MlpNet.create([d_c + 1, *hidden, 1], rng))
    if family == "mlp_ascend":
        k = max(5, d_c)
        return MlpAscendRegressor(
            MlpNet.create([d_c, k], rng), MlpNet.create([1, k], rng), MlpNet.create([2 * k, *hidden, 1], rng)
        )
    return ResnetSurrogate(ResNetRegressor.create(d_c + 1, 1, hidden, 1, rng))


@dataclass
class SurrogateEnsemble:
    """Independently seeded copies of one family, refit on demand.

    Inputs are divided by the box half-width and targets standardised with
    the statistics of the current training set.
    """

    family: str
    d_c: int
    members: list[Regressor]
    seeds: list[int]
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    fitted: bool = False
    n_fits: int = 0
    y_mean: float = 0.0
    y_std: float = 1.0
    losses: list[list[float]] = field(default_factory=list)

    def fit(self, C, A, B) -> None:
        C = np.asarray(C, dtype=np.float64).reshape(len(B), self.d_c) / BOX
        A = np.asarray(A, dtype=np.float64).reshape(len(B), 1) / BOX
        B = np.asarray(B, dtype=np.float64)
        self.y_mean = float(B.mean())
        self.y_std = float(B.std()) or 1.0
        Y = ((B - self.y_mean) / self.y_std)[:, None]
        self.losses = []
        for member, seed in zip(self.members, self.seeds):

            def loss_fn(idx, member=member):
                return ad.mean(ad.square(member.output_var(Var(C[idx]), Var(A[idx])) - Y[idx]))

            cfg = replace(self.train_cfg, seed=seed * 1000 + self.n_fits)
            self.losses.append(minibatch_train(member.parameters(), loss_fn, len(B), cfg))
        self.n_fits += 1
        self.fitted = True

    def predict_members(self, C, A) -> np.ndarray:
        """Member predictions in objective units, shape (members, n)."""
        if not self.fitted:
            raise StateError("ensemble has not been trained")
        A = np.asarray(A, dtype=np.float64).reshape(-1, 1) / BOX
        C = np.asarray(C, dtype=np.float64)
        C = (np.broadcast_to(C, (len(A), self.d_c)) if C.ndim == 1 else C) / BOX
        return np.stack([m.predict(C, A) * self.y_std + self.y_mean for m in self.members])

    def num_params(self) -> int:
        return self.members[0].num_params()


def build_surrogate(family: str, d_c: int, seed: int = 0, cfg: TrainConfig | None = None, size: int = ENSEMBLE_SIZE):
    seeds = [int(s) for s in np.random.SeedSequence([seed, FAMILIES.index(family) if family in FAMILIES else 0]).generate_state(size)]
    members = [build_member(family, d_c, s) for s in seeds]
    return SurrogateEnsemble(family, d_c, members, seeds, cfg or TrainConfig())


def ensemble_predict(ens, c, a) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population standard deviation of the member outputs."""
    preds = ens.predict_members(c, a)
    return preds.mean(axis=0), preds.std(axis=0)


class OracleSurrogate:
    """Test double: every member returns the true objective."""

    def __init__(self, problem, size: int = ENSEMBLE_SIZE):
        self.problem = problem
        self.size = size
        self.fitted = True

    def fit(self, C, A, B) -> None:
        pass

    def predict_members(self, C, A) -> np.ndarray:
        A = np.asarray(A, dtype=np.float64).ravel()
        C = np.asarray(C, dtype=np.float64)
        v = np.asarray(self.problem.value(C, A), dtype=np.float64).reshape(len(A))
        return np.tile(v, (self.size, 1))


class RandomSurrogate:
    """Test double: i.i.d. noise predictions carrying no information."""

    def __init__(self, seed: int = 0, size: int = ENSEMBLE_SIZE):
        self.rng = np.random.default_rng(seed)
        self.size = size
        self.fitted = True

    def fit(self, C, A, B) -> None:
        pass

    def predict_members(self, C, A) -> np.ndarray:
        n = np.asarray(A).size
        return self.rng.standard_normal((self.size, n))


class ConstantSurrogate:
    """Test double: the same constant for every input and member."""

    def __init__(self, value: float = 0.0, size: int = ENSEMBLE_SIZE):
        self.value = float(value)
        self.size = size
        self.fitted = True

    def fit(self, C, A, B) -> None:
        pass

    def predict_members(self, C, A) -> np.ndarray:
        return np.full((self.size, np.asarray(A).size), self.value)
