"""
Evaluation package for the geolocalization head.
"""

from evaluation.evaluate import (
    compare_datasets,
    dataset_statistics,
    evaluate,
    evaluate_all_modes,
    print_comparison,
    run_ablation,
)
from evaluation.metrics import AblationRow, AblationTrial, DatasetStatistics, EvaluationReport
from evaluation.runner import ABLATION_GRID, AblationVariant, RunConfig, resolve_checkpoint, run_trial

__all__ = [
    "ABLATION_GRID",
    "AblationRow",
    "AblationTrial",
    "AblationVariant",
    "DatasetStatistics",
    "EvaluationReport",
    "RunConfig",
    "compare_datasets",
    "dataset_statistics",
    "evaluate",
    "evaluate_all_modes",
    "print_comparison",
    "resolve_checkpoint",
    "run_ablation",
    "run_trial",
]
