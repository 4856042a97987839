"""Experiment orchestration: training with validation checkpointing, grid
search, duration aggregation, metrics and ablation batteries."""

from .experiment import ExperimentSpec, LeakageError, SpecError, TrialResult, run_trial, train_model
from .metrics import metric, percent_change, spearman
from .search import (
    ABLATION_LABELS,
    AggregateReport,
    aggregate_durations,
    ablation_battery,
    benchmark,
    derive_seeds,
    expand_space,
    grid_search,
    rank_trials,
)

__all__ = [
    "ABLATION_LABELS",
    "AggregateReport",
    "ExperimentSpec",
    "LeakageError",
    "SpecError",
    "TrialResult",
    "ablation_battery",
    "aggregate_durations",
    "benchmark",
    "derive_seeds",
    "expand_space",
    "grid_search",
    "metric",
    "percent_change",
    "rank_trials",
    "run_trial",
    "spearman",
    "train_model",
]
