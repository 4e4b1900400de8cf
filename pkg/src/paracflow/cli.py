"""Command line entry point: ``paracflow run <config.json>`` and ``paracflow verify``.

Exit codes: 0 success, 2 invalid config, 3 numeric failure, 4 failed
verification suite.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import cbo, diffeo, flows, taiji, verify
from .io import write_csv, write_json
from .numkit import NumericError, TrainConfig

EXPERIMENTS = ("taiji", "taiji_compare", "bo", "kt", "decomp", "verify")

EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_VERIFY = 4

DEFAULTS = {
    "bo": {
        "benchmark": "trid",
        "d_c": [5, 20],
        "families": list(cbo.FAMILIES),
        "strategies": ["lcb"],
        "steps": 1000,
        "kappa": 1.0,
        "n_init": 100,
        "refit_every": 100,
        "refit_data": "full",
        "train": {"batch": 64, "epochs": 200, "lr": 0.01},
    },
    "kt": {
        "benchmark": "trid",
        "d_c": 20,
        "sizes": [500, 1000, 2000, 5000],
        "families": list(cbo.FAMILIES),
        "n_test": 1000,
        "train": {"batch": 64, "epochs": 200, "lr": 0.01},
    },
    "taiji": {
        "n_samples": 30000,
        "n_test": 5000,
        "n_layers": 6,
        "hidden": None,
        "epochs": 150,
        "batch": 64,
        "lr": 0.005,
        "lr_decay": 0.97,
        "eliminator": True,
        "eliminator_epochs": 100,
    },
    "taiji_compare": {"n": 3000, "epochs": 200, "ys": [0.0, 0.5, 1.0], "grid_points": 150, "cells": 40},
    "decomp": {"dims": [2, 3], "n_maps": 5, "delta": 0.1, "points": 50, "half_width": 1.2},
    "verify": {},
}


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


# ---------------------------------------------------------------------------
# config handling


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        out[k] = _merge(base[k], v) if isinstance(v, dict) and isinstance(base.get(k), dict) else v
    return out


def _positive_int(p: dict, key: str, prefix: str = "params") -> None:
    v = p.get(key)
    if isinstance(v, bool) or not isinstance(v, int) or v < 1:
        raise ConfigError(f"{prefix}.{key}", f"must be a positive integer, got {v!r}")


def _positive_number(p: dict, key: str, prefix: str = "params") -> None:
    v = p.get(key)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0:
        raise ConfigError(f"{prefix}.{key}", f"must be a positive number, got {v!r}")


def _families(p: dict) -> None:
    fams = p.get("families")
    if not isinstance(fams, list) or not fams:
        raise ConfigError("params.families", "must be a nonempty list")
    for f in fams:
        if f not in cbo.FAMILIES:
            raise ConfigError("params.families", f"unknown family {f!r} (choose from {', '.join(cbo.FAMILIES)})")


def _train(p: dict) -> None:
    t = p.get("train")
    if not isinstance(t, dict):
        raise ConfigError("params.train", "must be an object")
    _positive_int(t, "batch", "params.train")
    _positive_int(t, "epochs", "params.train")
    _positive_number(t, "lr", "params.train")


def load_config(path: str, overrides: dict | None = None) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc}")
    if not isinstance(doc, dict):
        raise ConfigError("config", "top level must be an object")
    return validate_config(doc, overrides)


def validate_config(doc: dict, overrides: dict | None = None) -> dict:
    exp = doc.get("experiment")
    if exp not in EXPERIMENTS:
        raise ConfigError("experiment", f"must be one of {', '.join(EXPERIMENTS)}, got {exp!r}")
    if "seed" not in doc:
        raise ConfigError("seed", "is required")
    cfg = {
        "experiment": exp,
        "seed": doc["seed"],
        "out_dir": doc.get("out_dir", os.path.join("runs", exp)),
        "trials": doc.get("trials", 1),
        "workers": doc.get("workers", 1),
        "params": _merge(DEFAULTS[exp], doc.get("params", {})),
    }
    unknown = set(doc) - {"experiment", "seed", "out_dir", "trials", "workers", "params"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown field")
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k == "steps":
            cfg["params"]["steps"] = v
        else:
            cfg[k] = v
    if isinstance(cfg["seed"], bool) or not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed", f"must be a nonnegative integer, got {cfg['seed']!r}")
    _positive_int(cfg, "trials", "config")
    _positive_int(cfg, "workers", "config")
    if not isinstance(cfg["out_dir"], str) or not cfg["out_dir"]:
        raise ConfigError("out_dir", "must be a nonempty path")
    p = cfg["params"]
    if exp == "bo":
        if p["benchmark"] not in cbo.KINDS:
            raise ConfigError("params.benchmark", f"unknown benchmark {p['benchmark']!r}")
        dcs = p["d_c"] if isinstance(p["d_c"], list) else [p["d_c"]]
        for d in dcs:
            _positive_int({"d_c": d}, "d_c")
        p["d_c"] = dcs
        _families(p)
        for s in p["strategies"]:
            if s not in cbo.STRATEGIES:
                raise ConfigError("params.strategies", f"unknown strategy {s!r}")
        for key in ("steps", "n_init", "refit_every"):
            _positive_int(p, key)
        if p["steps"] < p["n_init"]:
            raise ConfigError("params.steps", f"must be >= n_init ({p['n_init']})")
        if isinstance(p["kappa"], bool) or not isinstance(p["kappa"], (int, float)) or p["kappa"] < 0:
            raise ConfigError("params.kappa", f"must be >= 0, got {p['kappa']!r}")
        if p["refit_data"] not in ("full", "increment"):
            raise ConfigError("params.refit_data", "must be 'full' or 'increment'")
        _train(p)
    elif exp == "kt":
        if p["benchmark"] not in cbo.KINDS:
            raise ConfigError("params.benchmark", f"unknown benchmark {p['benchmark']!r}")
        _positive_int(p, "d_c")
        _positive_int(p, "n_test")
        if not isinstance(p["sizes"], list) or not p["sizes"]:
            raise ConfigError("params.sizes", "must be a nonempty list")
        for s in p["sizes"]:
            _positive_int({"sizes": s}, "sizes")
        _families(p)
        _train(p)
    elif exp == "taiji":
        for key in ("n_samples", "n_test", "n_layers", "epochs", "batch", "eliminator_epochs"):
            _positive_int(p, key)
        _positive_number(p, "lr")
        _positive_number(p, "lr_decay")
        if p["hidden"] is not None:
            _positive_int(p, "hidden")
    elif exp == "taiji_compare":
        for key in ("n", "epochs", "grid_points", "cells"):
            _positive_int(p, key)
    elif exp == "decomp":
        for d in p["dims"]:
            if d not in (1, 2, 3):
                raise ConfigError("params.dims", f"supported dims are 1, 2, 3, got {d!r}")
        _positive_int(p, "n_maps")
        _positive_int(p, "points")
        _positive_number(p, "delta")
        _positive_number(p, "half_width")
    return cfg


def trial_seed(base: int, trial: int) -> int:
    """Seed of trial ``trial``; independent of worker count and scheduling."""
    return int(np.random.SeedSequence([base, trial]).generate_state(1)[0])


def _train_cfg(t: dict) -> TrainConfig:
    return TrainConfig(batch=t["batch"], epochs=t["epochs"], lr=t["lr"])


def _log(msg: str) -> None:
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# experiments


def _bo_job(args):
    kind, d_c, family, strategy, trial, seed, p = args
    problem = cbo.ContextualProblem.make(kind, d_c)
    tr = cbo.run_bo(
        problem,
        family,
        strategy,
        p["steps"],
        seed,
        kappa=float(p["kappa"]),
        n_init=p["n_init"],
        refit_every=p["refit_every"],
        train_cfg=_train_cfg(p["train"]),
        refit_data=p["refit_data"],
    )
    return (kind, d_c, family, strategy, trial), tr


def _map(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def run_bo_experiment(cfg: dict) -> dict:
    p, out = cfg["params"], cfg["out_dir"]
    kind = p["benchmark"]
    jobs = [
        (kind, d_c, fam, strat, t, trial_seed(cfg["seed"], t), p)
        for d_c in p["d_c"]
        for fam in p["families"]
        for strat in p["strategies"]
        for t in range(cfg["trials"])
    ]
    results = _map(_bo_job, jobs, cfg["workers"])
    groups: dict[tuple, list] = {}
    final_rows = []
    for (k, d_c, fam, strat, t), tr in results:
        tr.write_csv(os.path.join(out, "traces", f"{k}_dc{d_c}_{fam}_{strat}_trial{t}.csv"))
        groups.setdefault((k, d_c, fam, strat), []).append(tr)
        final_rows.append((k, d_c, fam, strat, t, tr.seed, tr.cumulative_regret[-1], tr.n_params))
    summary_rows = []
    finals = {}
    for (k, d_c, fam, strat), trs in groups.items():
        for step, mean, std in cbo.summarize_traces(trs):
            summary_rows.append((k, d_c, fam, strat, int(step), mean, std))
        last = np.array([tr.cumulative_regret[-1] for tr in trs])
        finals[f"{k}/dc{d_c}/{fam}/{strat}"] = {"mean": float(last.mean()), "std": float(last.std()), "per_trial": last.tolist()}
        _log(f"bo {k} d_c={d_c} {fam} {strat}: final cumulative regret {last.mean():.4g} +- {last.std():.3g} over {len(trs)} trials")
    write_csv(
        os.path.join(out, "summary.csv"),
        ("benchmark", "d_c", "family", "strategy", "step", "mean_cumulative_regret", "std_cumulative_regret"),
        summary_rows,
    )
    write_csv(
        os.path.join(out, "final.csv"),
        ("benchmark", "d_c", "family", "strategy", "trial", "seed", "cumulative_regret", "n_params"),
        final_rows,
    )
    return finals


def _kt_job(args):
    kind, d_c, fam, sizes, trial, seed, p = args
    rep = cbo.kt_experiment(
        d_c, sizes, trials=1, seed=seed, kind=kind, families=[fam], n_test=p["n_test"], train_cfg=_train_cfg(p["train"])
    )
    return (fam, trial), rep


def run_kt_experiment(cfg: dict) -> dict:
    p, out = cfg["params"], cfg["out_dir"]
    # the trial seed fixes the data, so all families see the same samples
    jobs = [
        (p["benchmark"], p["d_c"], fam, p["sizes"], t, trial_seed(cfg["seed"], t), p)
        for fam in p["families"]
        for t in range(cfg["trials"])
    ]
    results = _map(_kt_job, jobs, cfg["workers"])
    report = cbo.KtReport(p["d_c"], p["n_test"])
    for (fam, _), rep in results:
        report.scores.setdefault(fam, {int(s): [] for s in p["sizes"]})
        report.flagged.setdefault(fam, {int(s): [] for s in p["sizes"]})
        for s in p["sizes"]:
            report.scores[fam][int(s)] += rep.scores[fam][int(s)]
            report.flagged[fam][int(s)] += rep.flagged[fam][int(s)]
        report.n_params.update(rep.n_params)
    report.write_csv(os.path.join(out, "kt_trials.csv"))
    report.write_summary_csv(os.path.join(out, "kt_summary.csv"))
    means = {fam: report.family_mean(fam) for fam in report.scores}
    for fam, m in means.items():
        _log(f"kt d_c={p['d_c']} {fam}: mean KT {m:.4f} ({report.n_params.get(fam)} params)")
    return {"mean_kt": means, "n_params": report.n_params}


def run_taiji_experiment(cfg: dict) -> dict:
    p, out, seed = cfg["params"], cfg["out_dir"], cfg["seed"]
    data = taiji.gen_taiji_dataset(p["n_samples"], seed)
    test = taiji.gen_taiji_dataset(p["n_test"], seed + 1)
    t0 = time.time()
    tcfg = taiji.TaijiConfig(
        n_layers=p["n_layers"], hidden=p["hidden"], epochs=p["epochs"], batch=p["batch"], lr=p["lr"], lr_decay=p["lr_decay"], seed=seed
    )
    model, trace = taiji.train_taiji_flow(data, tcfg)
    _log(f"taiji train: {len(trace)} epochs, final loss {trace[-1]:.4g}, {time.time() - t0:.1f}s")
    flows.save_checkpoint(model, os.path.join(out, "taiji_model.json"))
    rmse = taiji.heldout_rmse(model, test)
    deriv = taiji.derivative_report(model, test.x, y=1.0, max_rho=0.9)
    agree = taiji.region_agreement(model)
    write_csv(os.path.join(out, "derivatives.csv"), taiji.DERIVATIVE_COLUMNS, deriv.rows())
    write_csv(os.path.join(out, "loss.csv"), ("epoch", "loss"), ((i + 1, v) for i, v in enumerate(trace)))
    metrics = {
        "heldout_rmse": rmse,
        "median_rel_derivative_error": deriv.median_rel_error,
        "median_angle_error": deriv.median_angle_error,
        "median_magnitude_error": deriv.median_magnitude_error,
        "region_agreement": agree,
        "n_params": model.num_params(),
    }
    _log(f"taiji eval: rmse {rmse:.4f}, derivative error {deriv.median_rel_error:.4f}, region agreement {agree:.4f}")
    if p["eliminator"]:
        elim, _ = flows.fit_eliminator(
            model, data.context, data.x, cfg=TrainConfig(batch=256, epochs=p["eliminator_epochs"], seed=seed), seed=seed
        )
        resid = flows.eliminator_residual(model, elim, test.context, test.x)
        xhat = model.predict(test.context, test.x)
        rec = flows.invert_padded(model, elim, test.context, xhat)
        rec_err = np.linalg.norm(rec - test.x, axis=1)
        metrics["eliminator_mean_residual"] = float(resid.mean())
        metrics["inverse_median_error"] = float(np.median(rec_err))
        _log(f"taiji eliminator: mean residual {resid.mean():.4g}, median inverse error {np.median(rec_err):.4g}")
    write_json(os.path.join(out, "metrics.json"), metrics)
    return metrics


def run_taiji_compare(cfg: dict) -> dict:
    p, out = cfg["params"], cfg["out_dir"]
    res = taiji.run_baseline_comparison(
        cfg["seed"], n=p["n"], epochs=p["epochs"], ys=p["ys"], grid_points=p["grid_points"], cells=p["cells"]
    )
    rows = []
    for name, by_y in res.coverage.items():
        for y, c in by_y.items():
            rows.append((name, y, c, res.params[name]))
            taiji.write_prediction_grid(os.path.join(out, "grids", f"{name}_y{y:g}.csv"), res.inputs, res.grids[name][y])
        _log(f"taiji_compare {name}: coverage " + ", ".join(f"y={y:g}: {c:.3f}" for y, c in by_y.items()))
    write_csv(os.path.join(out, "coverage.csv"), ("model", "y", "coverage", "n_params"), rows)
    return {"coverage": {k: {str(y): v for y, v in d.items()} for k, d in res.coverage.items()}, "params": res.params}


def run_decomp(cfg: dict) -> dict:
    p, out = cfg["params"], cfg["out_dir"]
    rows, reports = [], []
    for d in p["dims"]:
        grid = diffeo.GridSpec.cube(d, p["half_width"], p["points"])
        for k in range(p["n_maps"]):
            s = trial_seed(cfg["seed"], 100 * d + k)
            f = diffeo.random_near_identity_map(d, p["delta"], s, grid)
            rep = diffeo.FactorizationReport(grid.to_dict())
            factors = diffeo.decompose_near_identity(f, grid, report=rep)
            rows.append((d, k, s, len(factors), rep.reconstruction_error, max(lv.delta for lv in rep.levels)))
            reports.append(json.loads(rep.to_json()))
        _log(f"decomp d={d}: {p['n_maps']} maps, worst reconstruction {max(r[4] for r in rows if r[0] == d):.3g}")
    write_csv(os.path.join(out, "decomp.csv"), ("dim", "map", "seed", "n_factors", "reconstruction_error", "max_level_delta"), rows)
    write_json(os.path.join(out, "decomp_reports.json"), reports)
    return {"maps": len(rows), "worst_reconstruction": max(r[4] for r in rows)}


def run_verify(cfg: dict | None = None) -> bool:
    results = verify.run_all()
    for r in results:
        _log(f"{'PASS' if r.ok else 'FAIL'} {r.name}: {r.detail}")
    if cfg is not None:
        write_csv(os.path.join(cfg["out_dir"], "verify.csv"), ("suite", "ok", "detail"), ((r.name, r.ok, r.detail) for r in results))
    return all(r.ok for r in results)


RUNNERS = {
    "bo": run_bo_experiment,
    "kt": run_kt_experiment,
    "taiji": run_taiji_experiment,
    "taiji_compare": run_taiji_compare,
    "decomp": run_decomp,
}


def run(cfg: dict) -> int:
    os.makedirs(cfg["out_dir"], exist_ok=True)
    if cfg["experiment"] == "verify":
        return 0 if run_verify(cfg) else EXIT_VERIFY
    result = RUNNERS[cfg["experiment"]](cfg)
    write_json(os.path.join(cfg["out_dir"], "result.json"), {"config": cfg, "result": result})
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="paracflow", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    rp = sub.add_parser("run", help="run an experiment from a JSON config")
    rp.add_argument("config")
    rp.add_argument("--seed", type=int)
    rp.add_argument("--out-dir")
    rp.add_argument("--workers", type=int)
    rp.add_argument("--steps", type=int)
    rp.add_argument("--trials", type=int)
    sub.add_parser("verify", help="run the invariant suites")
    cp = sub.add_parser("checkpoint", help="round-trip a saved model and compare probe outputs")
    cp.add_argument("path")
    return ap


def checkpoint_roundtrip(path: str) -> bool:
    model = flows.load_checkpoint(path)
    res = verify.checkpoint_roundtrip(model)
    _log(f"{'PASS' if res.ok else 'FAIL'} {res.name}: {res.detail}")
    return res.ok


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify":
            return 0 if run_verify() else EXIT_VERIFY
        if args.command == "checkpoint":
            return 0 if checkpoint_roundtrip(args.path) else EXIT_VERIFY
        overrides = {"seed": args.seed, "out_dir": args.out_dir, "workers": args.workers, "steps": args.steps, "trials": args.trials}
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return run(cfg)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except diffeo.PreconditionError as exc:
        print(f"precondition failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
