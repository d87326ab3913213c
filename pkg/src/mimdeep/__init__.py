"""Desk-scale masked image modeling with deeply supervised decoders."""

from .masking import MaskPlan, sample_mask
from .model import ModelConfig, default_taps, init_params
from .targets import TargetSpec, blend, default_alpha_schedule
from .tensor import Tape, Tensor
from .training import TrainConfig, pretrain

__all__ = [
    "MaskPlan",
    "ModelConfig",
    "Tape",
    "TargetSpec",
    "Tensor",
    "TrainConfig",
    "blend",
    "default_alpha_schedule",
    "default_taps",
    "init_params",
    "pretrain",
    "sample_mask",
]

__version__ = "0.1.0"
