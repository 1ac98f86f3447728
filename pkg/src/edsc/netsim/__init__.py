"""Network and consensus simulator for the latency experiments."""
from .config import ConfigError, SimConfig, WorkloadConfig
from .engine import MetricsRecord, SimResult, Simulation, run_simulation
from .metrics import summarize

__all__ = ["ConfigError", "MetricsRecord", "SimConfig", "SimResult", "Simulation", "WorkloadConfig",
           "run_simulation", "summarize"]
