"""Experiment runner: configs, trials, the gradient-descent baseline, CSV logs and plots."""

from .config import ConfigError, ExperimentConfig, config_from_dict, parse_config
from .logio import read_csv, write_csv
from .plotting import band_statistics, emit_plots
from .runner import CSV_FIELDS, LogRow, TrialLog, baseline_pdp_gd, build_experiment, run_trial, run_trials, summarize

__all__ = [
    "CSV_FIELDS", "ConfigError", "ExperimentConfig", "LogRow", "TrialLog", "band_statistics", "baseline_pdp_gd",
    "build_experiment", "config_from_dict", "emit_plots", "parse_config", "read_csv", "run_trial", "run_trials",
    "summarize", "write_csv",
]
