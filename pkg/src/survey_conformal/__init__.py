"""Group-aware ordinal conformal prediction with survey-weighted auditing."""

from .conformal import (
    CalibrationScores,
    Method,
    PredictionSets,
    ThresholdSet,
    calibrate,
    conformal_quantile,
    coverage_floor,
    mse_optimal_weight,
    ordinal_scores,
    predict_sets,
    score_calibration,
    shrinkage_mse,
    shrinkage_weight,
    weighted_conformal_quantile,
)
from .data import DatasetSchema, DataValidationError, ProbabilityMatrix, SurveyDataset, cross_tabulate, load_dataset
from .evaluation import (
    DiagnosticsReport,
    SplitResult,
    evaluate_split,
    paired_stats,
    weighted_coverage,
    weighted_gap,
    weighted_group_coverage,
    weighted_size,
)
from .harness import ExperimentConfig, mechanism_study, run_experiment
from .predictors import fit_ordered_logistic, fit_prior, ingest_probs, predict_probs
from .splitter import Partition, SplitAssignment, make_splits, verify_split
from .synthetic import GeneratorConfig, exchangeable_stream, generate

__version__ = "0.1.0"

__all__ = [
    "CalibrationScores",
    "DataValidationError",
    "DatasetSchema",
    "DiagnosticsReport",
    "ExperimentConfig",
    "GeneratorConfig",
    "Method",
    "Partition",
    "PredictionSets",
    "ProbabilityMatrix",
    "SplitAssignment",
    "SplitResult",
    "SurveyDataset",
    "ThresholdSet",
    "calibrate",
    "conformal_quantile",
    "coverage_floor",
    "cross_tabulate",
    "evaluate_split",
    "exchangeable_stream",
    "fit_ordered_logistic",
    "fit_prior",
    "generate",
    "ingest_probs",
    "load_dataset",
    "make_splits",
    "mechanism_study",
    "mse_optimal_weight",
    "ordinal_scores",
    "paired_stats",
    "predict_probs",
    "predict_sets",
    "run_experiment",
    "score_calibration",
    "shrinkage_mse",
    "shrinkage_weight",
    "verify_split",
    "weighted_conformal_quantile",
    "weighted_coverage",
    "weighted_gap",
    "weighted_group_coverage",
    "weighted_size",
]
