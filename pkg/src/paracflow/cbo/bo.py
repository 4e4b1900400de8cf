"""Contextual BO loop with periodic ensemble refits."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from ..io import write_csv
from ..numkit import TrainConfig
from .acquisition import acquire_lcb, acquire_thompson
from .benchmarks import ContextualProblem
from .surrogates import build_surrogate

TRACE_COLUMNS = ("step", "context_hash", "action", "value", "regret", "cumulative_regret")


def context_hash(c) -> str:
    return hashlib.sha1(np.ascontiguousarray(c, dtype=np.float64).tobytes()).hexdigest()[:16]


def _streams(seed: int):
    """Independent generators for contexts, initial actions and Thompson draws."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)]


@dataclass
class BoTrace:
    family: str
    strategy: str
    seed: int
    contexts: np.ndarray
    actions: np.ndarray
    values: np.ndarray
    best_values: np.ndarray
    regret: np.ndarray
    cumulative_regret: np.ndarray
    n_params: int | None = None

    def __len__(self) -> int:
        return len(self.actions)

    def rows(self):
        for t in range(len(self)):
            yield (
                t + 1,
                context_hash(self.contexts[t]),
                self.actions[t],
                self.values[t],
                self.regret[t],
                self.cumulative_regret[t],
            )

    def write_csv(self, path) -> None:
        write_csv(path, TRACE_COLUMNS, self.rows())


def run_bo(
    problem: ContextualProblem,
    family: str,
    strategy: str = "lcb",
    total_steps: int = 1000,
    seed: int = 0,
    kappa: float = 1.0,
    n_init: int = 100,
    refit_every: int = 100,
    train_cfg: TrainConfig | None = None,
    refit_data: str = "full",
    surrogate=None,
) -> BoTrace:
    """One BO trial.

    Contexts and the ``n_init`` random warm-up actions depend only on
    ``seed``, so every family sees the same sequence.  ``refit_data`` is
    ``"full"`` (whole history) or ``"increment"`` (only rows since the last
    fit; the members are warm-started either way).
    """
    if total_steps < n_init or n_init < 1:
        raise ValueError(f"total_steps ({total_steps}) must be >= n_init ({n_init}) >= 1")
    if strategy not in ("lcb", "thompson"):
        raise ValueError(f"unknown strategy {strategy!r}")
    if refit_data not in ("full", "increment"):
        raise ValueError(f"unknown refit_data {refit_data!r}")
    ctx_rng, init_rng, ts_rng = _streams(seed)
    grid = problem.action_grid
    contexts = problem.sample_contexts(ctx_rng, total_steps)
    init_actions = grid[init_rng.integers(len(grid), size=n_init)]
    best = problem.grid_values(contexts)
    best = best.min(axis=1) if problem.sense == "min" else best.max(axis=1)

    ens = surrogate if surrogate is not None else build_surrogate(family, problem.d_c, seed, train_cfg)
    actions = np.empty(total_steps)
    values = np.empty(total_steps)
    last_fit = 0
    for t in range(total_steps):
        c = contexts[t]
        if t < n_init:
            a = init_actions[t]
        elif strategy == "lcb":
            a = acquire_lcb(ens, c, grid, kappa, problem.sense)
        else:
            a = acquire_thompson(ens, c, grid, ts_rng, problem.sense)
        actions[t] = a
        values[t] = problem.value(c, a)
        done = t + 1
        if done < total_steps and done >= n_init and (done - n_init) % refit_every == 0:
            lo = 0 if refit_data == "full" else last_fit
            ens.fit(contexts[lo:done], actions[lo:done], values[lo:done])
            last_fit = done
    regret = np.maximum(problem.regret(values, best), 0.0)
    n_params = ens.num_params() if hasattr(ens, "num_params") else None
    return BoTrace(family, strategy, seed, contexts, actions, values, best, regret, np.cumsum(regret), n_params)


def summarize_traces(traces: list[BoTrace]) -> np.ndarray:
    """(steps, 3) array: step, mean and population std of cumulative regret."""
    cum = np.stack([tr.cumulative_regret for tr in traces])
    steps = np.arange(1, cum.shape[1] + 1)
    return np.column_stack([steps, cum.mean(axis=0), cum.std(axis=0)])


def write_summary_csv(path, traces: list[BoTrace]) -> None:
    summary = summarize_traces(traces)
    write_csv(path, ("step", "mean_cumulative_regret", "std_cumulative_regret"),
              ((int(s), m, sd) for s, m, sd in summary))
