"""Explicit learned regularizers solved by proximal gradient descent.

Reconstruction minimizes ``f(x) = g(x) + tau h_theta(x)``: ``g`` is a data term
with a closed-form prox, ``h_theta`` a scalar functional of a small
convolutional network. Training differentiates through the fixed point of the
proximal-gradient map.
"""

from .errors import (ConfigError, ContractionError, ElderError, FormatError, NumericError,
                     ShapeError, StepFailure, UnsupportedPrimitiveError)
from .forward_model import BlurDownsample, FourierMask, GenericLinear, InpaintMask, Problem, simulate
from .network import ArchConfig, NetworkWeights, build_network, load_weights, save_weights
from .regularizer import Regularizer, RegularizerKind
from .solver import FixedPointResult, SolverConfig, run_forward
from .trainer import TaskSpec, TrainConfig, pretrain_denoiser, train_deq

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "BlurDownsample", "ConfigError", "ContractionError", "ElderError",
    "FixedPointResult", "FormatError", "FourierMask", "GenericLinear", "InpaintMask",
    "NetworkWeights", "NumericError", "Problem", "Regularizer", "RegularizerKind",
    "ShapeError", "SolverConfig", "StepFailure", "TaskSpec", "TrainConfig",
    "UnsupportedPrimitiveError", "build_network", "load_weights", "pretrain_denoiser",
    "run_forward", "save_weights", "simulate", "train_deq",
]
