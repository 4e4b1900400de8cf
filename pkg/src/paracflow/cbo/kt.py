"""Kendall's tau-b and the action-ranking experiment."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..io import write_csv
from ..numkit import TrainConfig
from .benchmarks import ContextualProblem
from .surrogates import FAMILIES, build_surrogate


def kendall_tau_rows(pred: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise tau-b of two (n, m) arrays.

    Returns (tau, flagged).  A row is flagged, with tau 0, when either side is
    entirely tied and tau-b is undefined.
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    truth = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    m = pred.shape[1]
    if m < 2:
        raise ValueError("need at least two items")
    iu, ju = np.triu_indices(m, 1)
    sp = np.sign(pred[:, ju] - pred[:, iu])
    st = np.sign(truth[:, ju] - truth[:, iu])
    num = (sp * st).sum(axis=1)
    # pairs not tied on each side
    untied_p = np.count_nonzero(sp, axis=1).astype(np.float64)
    untied_t = np.count_nonzero(st, axis=1).astype(np.float64)
    denom = np.sqrt(untied_p * untied_t)
    flagged = denom == 0
    tau = np.where(flagged, 0.0, num / np.where(flagged, 1.0, denom))
    return np.clip(tau, -1.0, 1.0), flagged


def kendall_tau(pred, truth, return_flag: bool = False):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if len(pred) != len(truth):
        raise ValueError(f"length mismatch {len(pred)} vs {len(truth)}")
    tau, flag = kendall_tau_rows(pred[None], truth[None])
    return (float(tau[0]), bool(flag[0])) if return_flag else float(tau[0])


@dataclass
class KtReport:
    d_c: int
    n_test: int
    # scores[family][size] -> per-trial mean KT over the test contexts
    scores: dict[str, dict[int, list[float]]] = field(default_factory=dict)
    flagged: dict[str, dict[int, list[int]]] = field(default_factory=dict)
    n_params: dict[str, int] = field(default_factory=dict)

    def family_mean(self, family: str) -> float:
        return float(np.mean([s for v in self.scores[family].values() for s in v]))

    def summary(self) -> list[tuple]:
        out = []
        for fam, by_size in self.scores.items():
            for size, vals in by_size.items():
                out.append((fam, size, float(np.mean(vals)), float(np.std(vals))))
        return out

    def rows(self):
        for fam, by_size in self.scores.items():
            for size, vals in by_size.items():
                for trial, v in enumerate(vals):
                    yield fam, size, trial, v, self.flagged[fam][size][trial]

    def write_csv(self, path) -> None:
        write_csv(path, ("family", "size", "trial", "kt", "flagged_contexts"), self.rows())

    def write_summary_csv(self, path) -> None:
        write_csv(path, ("family", "size", "mean_kt", "std_kt"), self.summary())


def _trial_seeds(seed: int, trial: int):
    data_ss, test_ss = np.random.SeedSequence([seed, trial]).spawn(2)
    return data_ss, np.random.default_rng(test_ss)


def kt_experiment(
    d_c: int,
    sizes: Sequence[int] = (500, 1000, 2000, 5000),
    trials: int = 5,
    seed: int = 0,
    kind: str = "trid",
    families: Sequence[str] = FAMILIES,
    n_test: int = 1000,
    train_cfg: TrainConfig | None = None,
    surrogate_factory: Callable | None = None,
) -> KtReport:
    """Train one model per (family, size, trial) on uniform data and score
    its action ranking on ``n_test`` fresh contexts.

    The data of a (size, trial) cell is shared by all families.
    ``surrogate_factory(family, d_c, seed)`` replaces the real families.
    """
    if not sizes:
        raise ValueError("sizes must be nonempty")
    problem = ContextualProblem.make(kind, d_c)
    report = KtReport(d_c, n_test)
    for fam in families:
        report.scores[fam] = {int(s): [] for s in sizes}
        report.flagged[fam] = {int(s): [] for s in sizes}
    for trial in range(trials):
        data_ss, test_rng = _trial_seeds(seed, trial)
        test_c = problem.sample_contexts(test_rng, n_test)
        truth = problem.grid_values(test_c)
        g = len(problem.action_grid)
        flat_c = np.repeat(test_c, g, axis=0)
        flat_a = np.tile(problem.action_grid, n_test)
        for size, ss in zip(sizes, data_ss.spawn(len(sizes))):
            rng = np.random.default_rng(ss)
            C = problem.sample_contexts(rng, int(size))
            A = rng.uniform(problem.action_grid[0], problem.action_grid[-1], int(size))
            B = problem.value(C, A)
            model_seed = int(ss.generate_state(1)[0])
            for fam in families:
                if surrogate_factory is not None:
                    model = surrogate_factory(fam, d_c, model_seed)
                else:
                    model = build_surrogate(fam, d_c, model_seed, train_cfg, size=1)
                model.fit(C, A, B)
                pred = model.predict_members(flat_c, flat_a).mean(axis=0).reshape(n_test, g)
                tau, flag = kendall_tau_rows(pred, truth)
                report.scores[fam][int(size)].append(float(tau.mean()))
                report.flagged[fam][int(size)].append(int(flag.sum()))
                if hasattr(model, "num_params"):
                    report.n_params[fam] = model.num_params()
    return report
