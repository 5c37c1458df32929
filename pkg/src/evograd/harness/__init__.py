"""Experiment harness: configuration, metrics CSVs, summaries, CLI."""

from evograd.harness.config import ConfigError, ExperimentConfig, build_config, validate
from evograd.harness.metrics import MetricsRecord, MetricsWriter, summarize
from evograd.harness.runner import run_experiment, run_sweep

__all__ = [
    "ConfigError", "ExperimentConfig", "build_config", "validate",
    "MetricsRecord", "MetricsWriter", "summarize",
    "run_experiment", "run_sweep",
]
