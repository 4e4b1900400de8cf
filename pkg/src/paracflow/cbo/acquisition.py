"""Grid acquisition rules.  Ties always go to the smallest action."""
from __future__ import annotations

import numpy as np


def _best(scores: np.ndarray, sense: str) -> int:
    return int(np.argmin(scores) if sense == "min" else np.argmax(scores))


def lcb_scores(mean: np.ndarray, std: np.ndarray, kappa: float, sense: str = "min") -> np.ndarray:
    # for maximisation this is the mirrored upper bound
    return mean - kappa * std if sense == "min" else mean + kappa * std


def acquire_lcb(ens, c, grid, kappa: float = 1.0, sense: str = "min") -> float:
    if kappa < 0:
        raise ValueError("kappa must be nonnegative")
    grid = np.asarray(grid, dtype=np.float64)
    preds = ens.predict_members(c, grid)
    scores = lcb_scores(preds.mean(axis=0), preds.std(axis=0), kappa, sense)
    return float(grid[_best(scores, sense)])


def acquire_thompson(ens, c, grid, rng: np.random.Generator, sense: str = "min") -> float:
    grid = np.asarray(grid, dtype=np.float64)
    preds = ens.predict_members(c, grid)
    k = int(rng.integers(len(preds)))
    return float(grid[_best(preds[k], sense)])


STRATEGIES = ("lcb", "thompson")
