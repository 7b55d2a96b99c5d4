"""Timestep-dependent low-rank adapters on a toy 2-D conditional DDPM.

Provides the adapter family (LoRA, OrthoLoRA, T-LoRA, AdaLoRA-style SVD),
a small autodiff core, the diffusion toy world and the analysis toolkit.
"""
from .adapters import AdapterKind, LinearAdapter, MaskSchedule, build_adapter
from .config import ExperimentConfig, load_config
from .diffusion import Denoiser, NoiseSchedule, TimestepSampler, ToyDataset, finetune, pretrain, sample
from .errors import CheckpointError, ConfigError, DecompositionError, DomainError, NumericalError, TLoraError

__all__ = [
    "AdapterKind",
    "LinearAdapter",
    "MaskSchedule",
    "build_adapter",
    "ExperimentConfig",
    "load_config",
    "Denoiser",
    "NoiseSchedule",
    "TimestepSampler",
    "ToyDataset",
    "finetune",
    "pretrain",
    "sample",
    "CheckpointError",
    "ConfigError",
    "DecompositionError",
    "DomainError",
    "NumericalError",
    "TLoraError",
]
