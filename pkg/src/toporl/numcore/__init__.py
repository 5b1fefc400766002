"""Minimal dense-tensor numeric core: autodiff, Adam, checkpoints."""

from .autodiff import (
    Tape,
    Tensor,
    add,
    backward,
    clip_const,
    concat_cols,
    concat_rows,
    cross_entropy,
    dropout,
    embedding_lookup,
    exp,
    finite_difference_gradient,
    gelu,
    layer_norm,
    linear,
    matmul,
    mean_rows,
    minimum,
    mul,
    multi_head_attention,
    no_grad,
    parameter,
    reshape,
    scale,
    slice_cols,
    softmax,
    stack_rows,
    sub,
    sum_all,
    take_rows,
    tape_active,
    transpose,
)
from .checkpoint import load_tensors, save_tensors
from .optim import AdamState, adam_step, init_adam, zero_grads

__all__ = [
    "AdamState",
    "Tape",
    "Tensor",
    "add",
    "adam_step",
    "backward",
    "clip_const",
    "concat_cols",
    "concat_rows",
    "cross_entropy",
    "dropout",
    "embedding_lookup",
    "exp",
    "finite_difference_gradient",
    "gelu",
    "init_adam",
    "layer_norm",
    "linear",
    "load_tensors",
    "matmul",
    "mean_rows",
    "minimum",
    "mul",
    "multi_head_attention",
    "no_grad",
    "parameter",
    "reshape",
    "save_tensors",
    "scale",
    "slice_cols",
    "softmax",
    "stack_rows",
    "sub",
    "sum_all",
    "take_rows",
    "tape_active",
    "transpose",
    "zero_grads",
]
