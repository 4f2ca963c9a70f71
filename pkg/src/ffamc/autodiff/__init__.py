"""Minimal float64 reverse-mode kernel for the MCS predictors."""

from .checkpoint import CheckpointError, decode_tensors, encode_tensors, load_tensors, save_tensors
from .gradcheck import GradCheckReport, grad_check
from .layers import (
    AvgPool2d,
    BatchNorm2d,
    Conv2d,
    Dense,
    Flatten,
    Layer,
    LayerSpec,
    NumericError,
    Parameter,
    ReLU,
    concat,
    concat_backward,
    relu,
    sgd_step,
    softmax_ce,
)
from .lstm import LSTM, lstm_cell, lstm_cell_backward, sigmoid

__all__ = [
    "AvgPool2d", "BatchNorm2d", "CheckpointError", "Conv2d", "Dense", "Flatten", "GradCheckReport",
    "LSTM", "Layer", "LayerSpec", "NumericError", "Parameter", "ReLU", "concat", "concat_backward",
    "decode_tensors", "encode_tensors", "grad_check", "load_tensors", "lstm_cell", "lstm_cell_backward",
    "relu", "save_tensors", "sgd_step", "sigmoid", "softmax_ce",
]
