"""Open-set domain adaptation with rotation-based known/unknown separation."""
from .config import ExperimentConfig
from .dataset import ClassSplit, DomainSet, SyntheticSpec, generate_synthetic
from .harness import (OpennessSweepSpec, ablate, evaluate_stage1_only, run_openness_sweep,
                      run_pipeline, score_files)
from .metrics import MetricsReport, aggregate_runs, auc_roc, evaluate, hos, openness, os_score, os_star, unk_accuracy

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig", "ClassSplit", "DomainSet", "SyntheticSpec", "generate_synthetic",
    "OpennessSweepSpec", "ablate", "evaluate_stage1_only", "run_openness_sweep", "run_pipeline",
    "score_files", "MetricsReport", "aggregate_runs", "auc_roc", "evaluate", "hos", "openness",
    "os_score", "os_star", "unk_accuracy",
]
