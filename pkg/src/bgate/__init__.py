"""Balanced group average treatment effect estimation.

Estimates group average treatment effects whose balancing covariates are
held to the population distribution, differences of such effects across
moderator groups, and the fully balanced interaction contrast, using
cross-fitted double machine learning, learned-representer debiasing, or
matching-based reweighting. A Monte Carlo harness scores the estimators
on a built-in simulation design.
"""

from .data import (
    ColumnRoles,
    DataError,
    Dataset,
    EffectEstimate,
    EffectKind,
    EffectTarget,
    EstimationError,
    FoldPlan,
    OverlapReport,
    WeightedSample,
    check_overlap,
    load_csv,
    make_fold_plan,
    save_csv,
)
from .dml import (
    Decomposition,
    DmlConfig,
    OracleNuisances,
    decompose_delta_gate,
    estimate_ate,
    estimate_bgate,
    estimate_delta_bgate,
    estimate_delta_cbgate,
    estimate_delta_gate,
    estimate_gate,
    tune_nuisance,
)
from .learners import (
    ForestConfig,
    Predictor,
    TuningGrid,
    fit_probability_forest,
    fit_regression_forest,
    tune_forest,
)
from .reweight import (
    MatchPlan,
    estimate_delta_bgate_reweighted,
    mahalanobis_distance,
    rebalance,
    save_balanced_csv,
    weighted_variance_factor,
)
from .riesz import (
    RieszNet,
    RieszNetConfig,
    estimate_auto_dml_delta_bgate,
    stage1_config,
    stage2_config,
)
from .scores import (
    NormalizedWeights,
    NuisanceFits,
    cbgate_score,
    normalize_truncate_weights,
    orthogonality_check,
    pseudo_outcome,
    second_stage_score,
    single_group_score,
)
from .simlab import (
    PAPER_DGP,
    DgpSample,
    EstimatorSpec,
    PaperDgp,
    PerformanceReport,
    StudyResult,
    performance_measures,
    run_study,
    sim_target,
    true_effect,
    tuned_dml_config,
)

__version__ = "0.1.0"
