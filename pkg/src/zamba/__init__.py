"""Hybrid Mamba/shared-attention language model on a numpy autograd core."""

from .inference import GenState, generate, memory_report, prefill, step_decode
from .model import ConfigError, Model, ZambaConfig, build, count_params, forward, gsa_sites, load_checkpoint, save_checkpoint
from .schedule import AnnealSchedule, Phase1Schedule, solve_anneal_coeffs
from .train import NumericalError, OptimizerState, mix_sampler, train_step

__version__ = "0.1.0"

__all__ = [
    "AnnealSchedule",
    "ConfigError",
    "GenState",
    "Model",
    "NumericalError",
    "OptimizerState",
    "Phase1Schedule",
    "ZambaConfig",
    "build",
    "count_params",
    "forward",
    "generate",
    "gsa_sites",
    "load_checkpoint",
    "memory_report",
    "mix_sampler",
    "prefill",
    "save_checkpoint",
    "solve_anneal_coeffs",
    "step_decode",
    "train_step",
]
