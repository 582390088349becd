"""Federated domain-adversarial regression on a small reverse-mode autodiff."""

from .data import DatasetSplit, GenConfig, generate, load_csv, mae, write_csv
from .errors import ConfigError, DataError, DimensionError, DivergedError, UsageError
from .fed import FedConfig, TrainConfig, fedavg_aggregate, run_centralized, run_federated
from .harness import ExperimentConfig, ExperimentReport, baseline_matrix, mu_sweep, run_suite
from .nn import ModelSpec, ParamSet, init_params
from .objective import AlgoConfig, GrlSchedule, grl_lambda

__all__ = [
    "AlgoConfig",
    "ConfigError",
    "DataError",
    "DatasetSplit",
    "DimensionError",
    "DivergedError",
    "ExperimentConfig",
    "ExperimentReport",
    "FedConfig",
    "GenConfig",
    "GrlSchedule",
    "ModelSpec",
    "ParamSet",
    "TrainConfig",
    "UsageError",
    "baseline_matrix",
    "fedavg_aggregate",
    "generate",
    "grl_lambda",
    "init_params",
    "load_csv",
    "mae",
    "mu_sweep",
    "run_centralized",
    "run_federated",
    "run_suite",
    "write_csv",
]
