"""Fast invariant suites shared by the ``verify`` command and the tests."""
from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import cbo, diffeo, flows, taiji
from .numkit import GradTape, MlpNet, Var
from .numkit import autodiff as ad


@dataclass
class SuiteResult:
    name: str
    ok: bool
    detail: str


def flow_invertibility(n_models: int = 200, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n_models):
        d = int(rng.integers(2, 17))
        d_a = int(rng.integers(1, d))
        d_c = int(rng.integers(0, 4))
        m = flows.build_paracflow(d_a, d_c, d, int(rng.integers(1, 7)), [int(rng.integers(4, 17))], seed + k)
        c = rng.normal(size=(4, d_c)) if d_c else None
        x = rng.normal(size=(4, d))
        worst = max(worst, float(np.max(np.abs(m.body_inverse(c, m.body_forward(c, x)) - x))))
    return SuiteResult("flow_invertibility", worst <= 1e-10, f"max round-trip error {worst:.3g}")


def gradient_check(n_nets: int = 20, seed: int = 0, h: float = 1e-6) -> SuiteResult:
    """Tape gradients of a scalar loss against central differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n_nets):
        dims = [int(rng.integers(1, 6)) for _ in range(int(rng.integers(2, 5)))]
        net = MlpNet.create(dims, rng)
        x = Var(rng.normal(size=(3, dims[0])))

        def loss():
            return ad.sum_all(ad.square(net.apply(x)))

        with GradTape() as tape:
            out = loss()
        grads = tape.gradient(out, net.parameters())
        for p, g in zip(net.parameters(), grads):
            flat = p.value.reshape(-1)
            fd = np.empty_like(flat)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                up = float(loss().value)
                flat[i] = old - h
                dn = float(loss().value)
                flat[i] = old
                fd[i] = (up - dn) / (2 * h)
            g = g.reshape(-1)
            scale = max(np.linalg.norm(fd), np.linalg.norm(g), 1e-8)
            worst = max(worst, float(np.linalg.norm(g - fd) / scale))
    return SuiteResult("gradient_check", worst <= 1e-5, f"max relative error {worst:.3g}")


def action_rank(model: flows.ParaCFlowModel, C: np.ndarray, A: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Numerical rank of d features / d a at each row (tolerance 1e-8 sigma_1)."""
    ranks = []
    for c, a in zip(C, A):
        J = np.empty((model.d, model.d_a))
        for j in range(model.d_a):
            e = np.zeros(model.d_a)
            e[j] = h
            J[:, j] = (model.features(c[None], (a + e)[None]) - model.features(c[None], (a - e)[None]))[0] / (2 * h)
        s = np.linalg.svd(J, compute_uv=False)
        ranks.append(int(np.sum(s > 1e-8 * s[0])) if s[0] > 0 else 0)
    return np.array(ranks)


def rank_preservation(n_points: int = 100, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    bad = 0
    for k in range(n_points):
        d_a = int(rng.integers(1, 4))
        d = d_a + int(rng.integers(1, 6))
        d_c = int(rng.integers(1, 4))
        m = flows.build_paracflow(d_a, d_c, d, 3, [8], seed + k)
        r = action_rank(m, rng.normal(size=(1, d_c)), rng.normal(size=(1, d_a)))
        bad += int(r[0] != d_a)
    return SuiteResult("rank_preservation", bad == 0, f"{bad} of {n_points} points rank-deficient")


def decomposition(seed: int = 0) -> SuiteResult:
    grid = diffeo.GridSpec.cube(2, 1.2, 30)
    f = diffeo.random_near_identity_map(2, 0.1, seed, grid)
    report = diffeo.FactorizationReport(grid.to_dict())
    factors = diffeo.decompose_near_identity(f, grid, report=report)
    ok = len(factors) == 2 and report.reconstruction_error <= 1e-6
    return SuiteResult("decomposition", ok, f"{len(factors)} factors, reconstruction {report.reconstruction_error:.3g}")


def padded_pipeline(seed: int = 0) -> SuiteResult:
    worst = 0.0
    for k in range(3):
        d = 1 + k
        tau = diffeo.random_monotone_factor(d, seed + k)
        l1, swap, l3 = diffeo.analytic_padded_pipeline(tau)
        X = np.random.default_rng(seed + k).uniform(-2, 2, size=(200, d))
        Z = np.concatenate([X, np.zeros((len(X), 1))], axis=1)
        out = l3.forward(None, swap.apply(l1.forward(None, Z)))
        worst = max(worst, float(np.max(np.abs(out - np.column_stack([tau(X), np.zeros(len(X))])))))
    return SuiteResult("padded_pipeline", worst <= 1e-9, f"max error {worst:.3g}")


def taiji_groundtruth(seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1.5, 1.5, size=(500, 2))
    rho = np.hypot(X[:, 0], X[:, 1])
    id0 = np.array_equal(taiji.taiji_apply(0.0, X), X)
    outside = np.array_equal(taiji.taiji_apply(0.7, X[rho >= 1]), X[rho >= 1])
    semi = float(np.max(np.abs(taiji.taiji_apply(0.3, taiji.taiji_apply(0.4, X)) - taiji.taiji_apply(0.7, X))))
    inner = X[rho < 0.95]
    d, _ = taiji.taiji_dy(0.5, inner)
    h = 1e-6
    fd = (taiji.taiji_apply(0.5 + h, inner) - taiji.taiji_apply(0.5 - h, inner)) / (2 * h)
    dy_err = float(np.max(np.abs(fd - d)))
    ok = id0 and outside and semi <= 1e-12 and dy_err <= 1e-6
    return SuiteResult("taiji_groundtruth", ok, f"semigroup {semi:.3g}, dy error {dy_err:.3g}")


def benchmarks() -> SuiteResult:
    ack = cbo.ackley(np.zeros(6))
    ras = cbo.rastrigin(np.zeros(6))
    tr = cbo.trid(np.array([2.0, 2.0]))
    ok = bool(abs(ack) <= 1e-12 and abs(ras) <= 1e-12 and tr == -2.0)
    return SuiteResult("benchmarks", ok, f"ackley {ack:.3g}, rastrigin {ras:.3g}, trid {tr:g}")


def kendall() -> SuiteResult:
    v = cbo.kendall_tau([1, 3, 2, 4], [1, 2, 3, 4])
    _, flag = cbo.kendall_tau([1, 1, 1], [1, 2, 3], return_flag=True)
    ok = abs(v - 4 / 6) <= 1e-12 and flag
    return SuiteResult("kendall_tau", ok, f"tau {v:.6f}, constant flagged {flag}")


def checkpoint_roundtrip(model: flows.ParaCFlowModel | None = None, seed: int = 0) -> SuiteResult:
    model = model or flows.build_paracflow(2, 3, 5, 4, [8], seed, head_hidden=[6])
    rng = np.random.default_rng(seed)
    C = rng.normal(size=(16, model.d_c))
    A = rng.normal(size=(16, model.d_a))
    with tempfile.TemporaryDirectory() as tmp:
        p1, p2 = os.path.join(tmp, "a.json"), os.path.join(tmp, "b.json")
        flows.save_checkpoint(model, p1)
        m1 = flows.load_checkpoint(p1)
        flows.save_checkpoint(m1, p2)
        m2 = flows.load_checkpoint(p2)
    same_params = all(np.array_equal(a.value, b.value) for a, b in zip(model.parameters(), m2.parameters()))
    same_out = np.array_equal(model.predict(C, A), m2.predict(C, A))
    return SuiteResult("checkpoint_roundtrip", same_params and same_out, f"params equal {same_params}, outputs equal {same_out}")


SUITES: dict[str, Callable[[], SuiteResult]] = {
    "flow_invertibility": flow_invertibility,
    "gradient_check": gradient_check,
    "rank_preservation": rank_preservation,
    "decomposition": decomposition,
    "padded_pipeline": padded_pipeline,
    "taiji_groundtruth": taiji_groundtruth,
    "benchmarks": benchmarks,
    "kendall_tau": kendall,
    "checkpoint_roundtrip": checkpoint_roundtrip,
}


def run_all() -> list[SuiteResult]:
    out = []
    for name, fn in SUITES.items():
        try:
            out.append(fn())
        except Exception as exc:  # a crashing suite is a failing suite
            out.append(SuiteResult(name, False, f"{type(exc).__name__}: {exc}"))
    return out
