from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..numkit import ShapeError

KINDS = ("ackley", "trid", "rastrigin")
BOX = 3.0
GRID_SIZE = 100


def ackley(z: np.ndarray) -> np.ndarray:
    return (
        -20.0 * np.exp(-0.2 * np.sqrt(np.mean(z**2, axis=-1)))
        - np.exp(np.mean(np.cos(2 * np.pi * z), axis=-1))
        + 20.0
        + np.e
    )


def trid(z: np.ndarray) -> np.ndarray:
    return np.sum((z - 1.0) ** 2, axis=-1) - np.sum(z[..., 1:] * z[..., :-1], axis=-1)


def rastrigin(z: np.ndarray) -> np.ndarray:
    n = z.shape[-1]
    return 10.0 * n + np.sum(z**2 - 10.0 * np.cos(2 * np.pi * z), axis=-1)


_FUNCS = {"ackley": ackley, "trid": trid, "rastrigin": rastrigin}


@dataclass(frozen=True)
class Benchmark:
    kind: str
    dim: int

    def __post_init__(self):
        if self.kind not in _FUNCS and self.kind != "flat":
            raise ValueError(f"unknown benchmark {self.kind!r}")
        if self.dim < 1:
            raise ValueError("dim must be positive")

    def __call__(self, z) -> np.ndarray:
        return benchmark_eval(self, z)


def benchmark_eval(b: Benchmark, z):
    """Value at ``z`` (shape (dim,) -> float, (n, dim) -> (n,))."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != b.dim:
        raise ShapeError(f"{b.kind} expects width {b.dim}, got {z.shape[-1]}")
    if b.kind == "flat":
        out = np.zeros(z.shape[:-1])
    else:
        out = _FUNCS[b.kind](z)
    return float(out) if z.ndim == 1 else out


def flat_benchmark(dim: int) -> Benchmark:
    """Constant function; only useful to exercise tie-breaking."""
    return Benchmark("flat", dim)


@dataclass
class ContextualProblem:
    """First ``d_c`` coordinates are the context, the last one is the action."""

    benchmark: Benchmark
    d_c: int
    sense: str = "min"
    action_grid: np.ndarray = field(default_factory=lambda: np.linspace(-BOX, BOX, GRID_SIZE))

    def __post_init__(self):
        if self.benchmark.dim != self.d_c + 1:
            raise ShapeError(f"benchmark dim {self.benchmark.dim} != d_c + 1 = {self.d_c + 1}")
        if self.sense not in ("min", "max"):
            raise ValueError("sense must be 'min' or 'max'")

    @classmethod
    def make(cls, kind: str, d_c: int, sense: str = "min") -> "ContextualProblem":
        return cls(Benchmark(kind, d_c + 1), d_c, sense)

    def sample_contexts(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(-BOX, BOX, size=(n, self.d_c))

    def value(self, c, a):
        """Objective at context(s) ``c`` and action(s) ``a``."""
        c = np.asarray(c, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        if c.ndim == 1 and a.ndim == 0:
            return benchmark_eval(self.benchmark, np.append(c, a))
        a = np.atleast_1d(a)
        C = np.broadcast_to(c, (len(a), self.d_c)) if c.ndim == 1 else c
        return benchmark_eval(self.benchmark, np.column_stack([C, a]))

    def grid_values(self, c) -> np.ndarray:
        """Values over the action grid for one context (100,) or many (n, 100)."""
        c = np.asarray(c, dtype=np.float64)
        if c.ndim == 1:
            return self.value(c, self.action_grid)
        n, g = len(c), len(self.action_grid)
        Z = np.concatenate([np.repeat(c, g, axis=0), np.tile(self.action_grid, n)[:, None]], axis=1)
        return benchmark_eval(self.benchmark, Z).reshape(n, g)

    def best_index(self, values: np.ndarray) -> np.ndarray:
        # argmin/argmax return the first hit, i.e. the smallest action on ties
        return np.argmin(values, axis=-1) if self.sense == "min" else np.argmax(values, axis=-1)

    def regret(self, value, best):
        return value - best if self.sense == "min" else best - value


def best_on_grid(problem: ContextualProblem, c) -> tuple[float, float]:
    vals = problem.grid_values(c)
    i = int(problem.best_index(vals))
    return float(problem.action_grid[i]), float(vals[i])
