"""Minimal dense-tensor engine: autodiff, losses, Adam, checkpoints."""

from .tensor import (
    ShapeError,
    Tape,
    Tensor,
    absolute,
    add,
    add_scalar,
    backward,
    concat,
    embedding_lookup,
    gather_elements,
    gather_rows,
    gelu,
    grad_enabled,
    layer_norm,
    masked_zero,
    matmul,
    mean_all,
    mean_axis,
    mul,
    mul_scalar,
    no_grad,
    normalize_rows,
    reshape,
    scale_rows,
    scatter_rows,
    sigmoid,
    slice_axis,
    softmax,
    sum_all,
    swapaxes,
    tensor,
    zeros,
)
from .losses import label_smoothed_cross_entropy
from .optim import AdamState, adam_step, lr_schedule
from .checkpoint import load_checkpoint, save_checkpoint, sidecar_path

__all__ = [
    "ShapeError",
    "Tape",
    "Tensor",
    "absolute",
    "add",
    "add_scalar",
    "backward",
    "concat",
    "embedding_lookup",
    "gather_elements",
    "gather_rows",
    "gelu",
    "grad_enabled",
    "layer_norm",
    "masked_zero",
    "matmul",
    "mean_all",
    "mean_axis",
    "mul",
    "mul_scalar",
    "no_grad",
    "normalize_rows",
    "reshape",
    "scale_rows",
    "scatter_rows",
    "sigmoid",
    "slice_axis",
    "softmax",
    "sum_all",
    "swapaxes",
    "tensor",
    "zeros",
    "label_smoothed_cross_entropy",
    "AdamState",
    "adam_step",
    "lr_schedule",
    "load_checkpoint",
    "save_checkpoint",
    "sidecar_path",
]
