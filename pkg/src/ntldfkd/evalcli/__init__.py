"""Metrics, persistence, and experiment orchestration."""

from .checkpoints import CheckpointError, checkpoint_load, checkpoint_save
from .metrics import (
    MetricsRecord,
    confusion_matrix,
    evaluate,
    export_decision_grid,
    robustness_consistency,
)
from .runner import (
    ConfigError,
    DEFAULT_CONFIG,
    load_config,
    resolve_config,
    run_experiment,
    run_matrix,
    run_single,
    run_sweep,
)

__all__ = [
    "CheckpointError",
    "checkpoint_load",
    "checkpoint_save",
    "MetricsRecord",
    "confusion_matrix",
    "evaluate",
    "export_decision_grid",
    "robustness_consistency",
    "ConfigError",
    "DEFAULT_CONFIG",
    "load_config",
    "resolve_config",
    "run_experiment",
    "run_matrix",
    "run_single",
    "run_sweep",
]
