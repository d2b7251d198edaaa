"""Time-varying Gaussian-process bandits with expert side queries.

SparQ-GP-UCB ages past observations into noisier ones, discards the stale
ones, and spends a small per-step budget of expert queries on a diverse
(M-DPP sampled) subset of previously visited locations. Baselines: GP-UCB
and its time-varying, restarting, sliding-window and weighted variants.
"""

from .algorithms import LABELS, VARIANTS, AlgorithmConfig
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .environment import EnvironmentSpec, load_csv_environment, synthetic_environment
from .gp import HeteroscedasticDataset, NumericalError, fit
from .harness import RegretTrace, run_batch, run_episode, theoretical_bound
from .kernel import KernelSpec

__all__ = [
    "LABELS", "VARIANTS", "AlgorithmConfig", "ConfigError", "ExperimentConfig", "load_config",
    "parse_config", "EnvironmentSpec", "load_csv_environment", "synthetic_environment",
    "HeteroscedasticDataset", "NumericalError", "fit", "RegretTrace", "run_batch", "run_episode",
    "theoretical_bound", "KernelSpec",
]

__version__ = "0.1.0"
