"""Experiment orchestration: pools, setups, bootstrap, CIs, ranking, reports."""
from forgetbench.harness.experiment import (
    ExperimentConfig,
    ExperimentResult,
    Setup,
    algorithm_config,
    null_epsilon_bound,
    run_bootstrap,
    run_calibration,
    run_experiment,
)
from forgetbench.harness.problem import Problem, ProblemConfig, build_problem
from forgetbench.harness.report import emit_report, load_report
from forgetbench.harness.stats import confidence_interval, rank_algorithms
from forgetbench.harness.store import ModelPoolStore

__all__ = [
    "ExperimentConfig",
    "ExperimentResult",
    "ModelPoolStore",
    "Problem",
    "ProblemConfig",
    "Setup",
    "algorithm_config",
    "build_problem",
    "confidence_interval",
    "emit_report",
    "load_report",
    "null_epsilon_bound",
    "rank_algorithms",
    "run_bootstrap",
    "run_calibration",
    "run_experiment",
]
