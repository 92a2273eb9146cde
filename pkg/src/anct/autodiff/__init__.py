"""Minimal reverse-mode autodiff on numpy arrays."""

from .gradcheck import grad_check
from .ops import (
    add,
    conv2d,
    global_avg_pool,
    grouped_linear,
    linear,
    matmul,
    maxpool2d,
    mse_loss,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax_vector,
    sum_all,
    take,
    weighted_sum_rows,
)
from .optim import OptimizerState, Param, adam_step, init_params
from .tensor import ShapeError, Tape, Tensor, UsageError, backward, no_record

__all__ = [
    "Tensor",
    "Tape",
    "Param",
    "OptimizerState",
    "ShapeError",
    "UsageError",
    "backward",
    "no_record",
    "grad_check",
    "adam_step",
    "init_params",
    "add",
    "conv2d",
    "global_avg_pool",
    "grouped_linear",
    "linear",
    "matmul",
    "maxpool2d",
    "mse_loss",
    "mul",
    "relu",
    "reshape",
    "scale",
    "sigmoid",
    "softmax_vector",
    "sum_all",
    "take",
    "weighted_sum_rows",
]
