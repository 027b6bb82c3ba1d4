"""
Retrieved-dropout multiple-imputation simulation engine.

Simulates two-arm trials with a binary endpoint, treatment discontinuation
and study withdrawal, imputes the missing treatment-policy outcomes with
the retrieved-dropout model family and scores the pooled estimates against
an oracle true effect.
"""
from .dgm import TrialDataset, simulate_trial
from .errors import DgmError, ManifestError, RdsimError, ScenarioError
from .glm import DesignMatrix, FitResult, GlmError, augment, draw_params, fit_logistic, predict_prob
from .impute import (
    ALL_MODELS,
    CompletedDataset,
    EmptyCell,
    ImputationError,
    MiModel,
    ModelKind,
    NonEstimable,
    impute_sequential,
)
from .metrics import RepResult, SummaryRow, TrueEffect, summarize, true_log_or
from .pool import PooledEstimate, PoolingError, analyze, rubin_pool
from .scenario import (
    Arm,
    ScenarioSpec,
    grid,
    list_presets,
    load_scenario,
    load_scenario_file,
    preset,
    serialize_scenario,
)
from .tables import emit_tables
from .varinfl import GroupCounts, VarianceInflationError, inflation_report, relative_variance_increase

__all__ = [
    "ALL_MODELS",
    "Arm",
    "CompletedDataset",
    "DesignMatrix",
    "DgmError",
    "EmptyCell",
    "FitResult",
    "GlmError",
    "GroupCounts",
    "ImputationError",
    "ManifestError",
    "MiModel",
    "ModelKind",
    "NonEstimable",
    "PooledEstimate",
    "PoolingError",
    "RdsimError",
    "RepResult",
    "ScenarioError",
    "ScenarioSpec",
    "SummaryRow",
    "TrialDataset",
    "TrueEffect",
    "VarianceInflationError",
    "analyze",
    "augment",
    "draw_params",
    "emit_tables",
    "fit_logistic",
    "grid",
    "impute_sequential",
    "inflation_report",
    "list_presets",
    "load_scenario",
    "load_scenario_file",
    "predict_prob",
    "preset",
    "relative_variance_increase",
    "rubin_pool",
    "serialize_scenario",
    "simulate_trial",
    "summarize",
    "true_log_or",
]
