"""Aggregation of clustering-based linear predictors for visual-field series."""

from .aggregation import (
    RegretLedger,
    WeightState,
    aggregate_prediction,
    batch_weights,
    flat_predict,
    hierarchical_predict,
    online_update,
    regret,
    rg_optimal_eta,
)
from .clustering import cluster_slopes, cluster_spatial, patient_feature
from .config import RunConfig
from .core import Expert, ExpertSource, PatientSeries, fit_intercept, loss, predict_linear, rmse
from .evaluation import (
    EvaluationRecord,
    binomial_test,
    improvement_rate,
    run_experiment,
    tune_eta_ir,
)
from .experts import (
    ExpertPool,
    build_lr_experts,
    build_sc_experts,
    build_tslr_experts,
    fit_pool_to_target,
)
from .synthdata import CohortConfig, generate_cohort

__all__ = [
    "CohortConfig",
    "EvaluationRecord",
    "Expert",
    "ExpertPool",
    "ExpertSource",
    "PatientSeries",
    "RegretLedger",
    "RunConfig",
    "WeightState",
    "aggregate_prediction",
    "batch_weights",
    "binomial_test",
    "build_lr_experts",
    "build_sc_experts",
    "build_tslr_experts",
    "cluster_slopes",
    "cluster_spatial",
    "fit_intercept",
    "fit_pool_to_target",
    "flat_predict",
    "generate_cohort",
    "hierarchical_predict",
    "improvement_rate",
    "loss",
    "online_update",
    "patient_feature",
    "predict_linear",
    "regret",
    "rg_optimal_eta",
    "rmse",
    "run_experiment",
    "tune_eta_ir",
]
