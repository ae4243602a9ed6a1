"""Completed feature disentanglement with dynamic mixture-of-experts fusion.

Works on precomputed per-modality feature vectors; numpy only.
"""

from .cfd import SubsetLattice, enumerate_subsets
from .config import AblationFlags, ConfigError, ModelConfig
from .dmf import CfdlModel, count_parameters
from .synthdata import SynthConfig, SynthDataset, generate
from .train import TrainConfig, fit, lr_at

__version__ = "0.1.0"

__all__ = [
    "AblationFlags", "CfdlModel", "ConfigError", "ModelConfig", "SubsetLattice", "SynthConfig",
    "SynthDataset", "TrainConfig", "count_parameters", "enumerate_subsets", "fit", "generate", "lr_at",
]
