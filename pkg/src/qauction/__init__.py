"""Auction-based upstream planning for cyber defense.

Q-values become bundle valuations (with optional curvature), a differentiable
combinatorial auction learns revenue- and regret-aware allocations, and exact
VCG / greedy baselines plus statistical evaluation close the loop.
"""

from .valuation import (
    ActionCatalog,
    Bundle,
    BundleIndex,
    CurvatureSpec,
    QMatrix,
    ValuationDataset,
    ValuationProfile,
    build_profile,
    bundle_value,
    enumerate_bundles,
    generate_dataset,
    minmax_scale,
    normalize_profile,
    q_from_value_advantage,
)
from .mechanism import (
    FeasibilityReport,
    MechanismOutcome,
    check_feasibility,
    ir_check,
    utility,
    welfare,
)
from .baselines import (
    MisreportSearchBudget,
    WdSolution,
    brute_force_wd,
    greedy_allocate,
    measured_regret,
    solve_wd,
    vcg_payments,
)
from .neural import (
    ArchConfig,
    MetricsRecord,
    ModelParams,
    TrainConfig,
    forward,
    load_checkpoint,
    misreport_ascent,
    regret_estimate,
    save_checkpoint,
    train,
)
from .simgym import GymConfig, QTable, export_host_q, q_learning, step, value_iteration
from .stats import CorrelationResult, allocation_scores, ks_two_sample, pearson, spearman

__version__ = "0.1.0"

__all__ = [
    "ActionCatalog",
    "ArchConfig",
    "Bundle",
    "BundleIndex",
    "CorrelationResult",
    "CurvatureSpec",
    "FeasibilityReport",
    "GymConfig",
    "MechanismOutcome",
    "MetricsRecord",
    "MisreportSearchBudget",
    "ModelParams",
    "QMatrix",
    "QTable",
    "TrainConfig",
    "ValuationDataset",
    "ValuationProfile",
    "WdSolution",
    "allocation_scores",
    "brute_force_wd",
    "build_profile",
    "bundle_value",
    "check_feasibility",
    "enumerate_bundles",
    "export_host_q",
    "forward",
    "generate_dataset",
    "greedy_allocate",
    "ir_check",
    "ks_two_sample",
    "load_checkpoint",
    "measured_regret",
    "minmax_scale",
    "misreport_ascent",
    "normalize_profile",
    "pearson",
    "q_from_value_advantage",
    "q_learning",
    "regret_estimate",
    "save_checkpoint",
    "solve_wd",
    "spearman",
    "step",
    "train",
    "utility",
    "value_iteration",
    "vcg_payments",
    "welfare",
]
