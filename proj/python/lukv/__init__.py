"""Long-horizon utility KV cache budget allocation.

Thin wrapper around the C++ core: synthetic attention traces, oracle
importance, per-head eviction-loss curves, convexification, the global
budget solvers, and the offline compression-ratio profiling pipeline.
"""

from lukv._core import (  # noqa: F401
    BudgetAllocation,
    ConfigError,
    EvalReport,
    ImportanceTensor,
    InfeasibleError,
    MetricKind,
    MetricSpec,
    ModelShape,
    Profile,
    Safeguards,
    Scenario,
    TraceBundle,
    ValidationError,
    __version__,
    adaptive_topk_allocate,
    aggregate_profile,
    apply_eviction,
    brute_force_allocate,
    budget_from_ratios,
    compare_solvers,
    compute_oracle_importance,
    decompose,
    default_ratio_grid,
    evaluate_allocation,
    eviction_loss,
    generate_synthetic_trace,
    greedy_allocate,
    load_profile,
    load_trace,
    lookup_ratios,
    loss_curve,
    mckp_dp_allocate,
    metric_ranking,
    metric_scores,
    oracle_ranking,
    pava_convexify,
    pyramid_allocate,
    recall_curve,
    save_profile,
    save_trace,
    second_difference_witness,
    selftest,
    solve_ratio_grid,
    uniform_allocate,
)
