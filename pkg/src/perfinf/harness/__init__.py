"""Command-line experiment runner."""

from perfinf.harness.config import ExperimentConfig, config_from_dict, load_config, default_config
from perfinf.harness.experiments import (
    TrialSummary,
    run_convergence,
    run_coverage,
    run_qq,
    run_score_eval,
    simulate,
)

__all__ = [
    "ExperimentConfig",
    "TrialSummary",
    "config_from_dict",
    "load_config",
    "default_config",
    "run_convergence",
    "run_coverage",
    "run_qq",
    "run_score_eval",
    "simulate",
]
