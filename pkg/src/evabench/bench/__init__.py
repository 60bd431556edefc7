"""Verification, error and runtime harness behind the ``evabench`` command."""
from .config import BenchConfig, ConfigError, load_config, parse_config
from .harness import BenchRecord, loglog_slope, run_bench, run_error

__all__ = ["BenchConfig", "BenchRecord", "ConfigError", "load_config", "loglog_slope", "parse_config",
           "run_bench", "run_error"]
