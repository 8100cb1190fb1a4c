"""Disentangling factors of variation with a conditional VAE and an adversary.

A numpy reverse-mode autodiff core, the encoder/decoder/discriminator
networks, the alternating training loop and the evaluation protocols
(swap and interpolation grids, retrieval, conditional sampling and the
identity-probe metric).
"""
from .autodiff import Tensor, check_gradients
from .datasets import LabeledImageSet, SyntheticFactorSpec, generate_synthetic, load_idx
from .estimator import DisentanglingVAEGAN
from .evaluation import (
    EvalReport,
    GridImage,
    conditional_samples,
    disentanglement_metric,
    interpolation_grid,
    retrieve,
    swap_grid,
)
from .model import VAEGAN, ArchConfig
from .png import encode_png
from .trainer import ModelCheckpoint, TrainConfig, Trainer, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "DisentanglingVAEGAN", "EvalReport", "GridImage", "LabeledImageSet", "ModelCheckpoint",
    "SyntheticFactorSpec", "Tensor", "TrainConfig", "Trainer", "VAEGAN", "check_gradients",
    "conditional_samples", "disentanglement_metric", "encode_png", "generate_synthetic", "interpolation_grid",
    "load_checkpoint", "load_idx", "retrieve", "save_checkpoint", "swap_grid",
]
