"""Lightweight two-stage image dehazing with contrastive regularization,
built on a small numpy autodiff engine."""

from .blocks import ArchConfig, DracoWeights, draco_forward, init_weights
from .estimator import DracoDehazer, HazeSynthesizer
from .haze import HazeRecipe, apply_asm, invert_asm
from .losses import LossWeights, Quadruple, draco_total_loss
from .metrics import count_flops, count_params, psnr, ssim_metric
from .tensor import Tensor, backward, grad_check
from .train import TrainConfig, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "DracoDehazer",
    "DracoWeights",
    "HazeRecipe",
    "HazeSynthesizer",
    "LossWeights",
    "Quadruple",
    "Tensor",
    "TrainConfig",
    "apply_asm",
    "backward",
    "count_flops",
    "count_params",
    "draco_forward",
    "draco_total_loss",
    "grad_check",
    "init_weights",
    "invert_asm",
    "load_checkpoint",
    "psnr",
    "save_checkpoint",
    "ssim_metric",
]
