"""Contextual Bayesian optimisation with neural-ensemble surrogates."""
from .acquisition import STRATEGIES, acquire_lcb, acquire_thompson, lcb_scores
from .benchmarks import (
    BOX,
    GRID_SIZE,
    KINDS,
    Benchmark,
    ContextualProblem,
    ackley,
    benchmark_eval,
    best_on_grid,
    flat_benchmark,
    rastrigin,
    trid,
)
from .bo import BoTrace, context_hash, run_bo, summarize_traces, write_summary_csv
from .kt import KtReport, kendall_tau, kendall_tau_rows, kt_experiment
from .surrogates import (
    ENSEMBLE_SIZE,
    FAMILIES,
    TABLE_PARAMS,
    TABLE_SHAPES,
    ConstantSurrogate,
    OracleSurrogate,
    RandomSurrogate,
    SurrogateEnsemble,
    build_member,
    build_surrogate,
    ensemble_predict,
    paracflow_param_count,
    paracflow_width,
)
