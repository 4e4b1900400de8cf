from __future__ import annotations

from typing import Callable

import numpy as np


def fd_jacobian(f: Callable, x, h: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of ``f`` at the point ``x``."""
    x = np.asarray(x, dtype=np.float64)
    f0 = np.atleast_1d(np.asarray(f(x), dtype=np.float64))
    jac = np.empty((f0.size, x.size))
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        jac[:, j] = (np.atleast_1d(f(x + e)) - np.atleast_1d(f(x - e))) / (2 * h)
    return jac


def fd_jacobian_batch(f: Callable, X, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobians of a vectorised ``f`` at every row of ``X``.

    ``f`` maps (n, d) to (n, k); the result has shape (n, k, d).
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    cols = []
    for j in range(d):
        Xp = X.copy()
        Xm = X.copy()
        Xp[:, j] += h
        Xm[:, j] -= h
        fp = np.asarray(f(Xp), dtype=np.float64).reshape(n, -1)
        fm = np.asarray(f(Xm), dtype=np.float64).reshape(n, -1)
        cols.append((fp - fm) / (2 * h))
    return np.stack(cols, axis=2)
