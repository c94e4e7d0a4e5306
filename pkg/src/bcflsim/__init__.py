"""Deterministic simulator for blockchain-coordinated federated glucose prediction."""

from .config import ScenarioConfig, Seeds, load_config
from .data import GlucoseSeries, HospitalDataset, WindowConfig, WindowedSample
from .learners import Hyperparams, ParamVector, Predictor
from .metrics import MetricsResult, mard, rmse
from .scenarios import RunResult, SuiteResult, build_world, run_mode, run_suite

__all__ = [
    "GlucoseSeries",
    "HospitalDataset",
    "Hyperparams",
    "MetricsResult",
    "ParamVector",
    "Predictor",
    "RunResult",
    "ScenarioConfig",
    "Seeds",
    "SuiteResult",
    "WindowConfig",
    "WindowedSample",
    "build_world",
    "load_config",
    "mard",
    "rmse",
    "run_mode",
    "run_suite",
]

__version__ = "0.1.0"
