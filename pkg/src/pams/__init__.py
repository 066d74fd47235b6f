"""Quantized super-resolution with learnable activation bounds.

A numpy reverse-mode autodiff core, symmetric fake quantizers with a
trainable clamp, an EDSR-style network whose residual blocks are quantized,
feature-map distillation, and tooling for bit-packed export and evaluation.
"""
from .errors import DimensionError, NumericError, PamsError, ParameterError, StateError, TrainingError
from .losses import LossWeights, pixel_l1, skt_loss, total_loss
from .model import ModelConfig, SRModel, build_model, quantize_from
from .training import TrainConfig, TrainReport, calibrate_alphas, evaluate, pretrain, train

__version__ = "0.1.0"

__all__ = [
    "DimensionError", "NumericError", "PamsError", "ParameterError", "StateError", "TrainingError",
    "LossWeights", "pixel_l1", "skt_loss", "total_loss",
    "ModelConfig", "SRModel", "build_model", "quantize_from",
    "TrainConfig", "TrainReport", "calibrate_alphas", "evaluate", "pretrain", "train",
]
