"""Dense float64 tensor math with a reverse-mode tape, Adam, and parameter blobs."""

from .tensor import (
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    add,
    attention_apply,
    attention_scores,
    backward,
    clip,
    concat_last,
    conv2d,
    dense,
    exp,
    gather_last,
    log_softmax,
    lstm_step,
    mean_all,
    minimum,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    spatial_mean,
    sub,
    sum_all,
    sum_last,
    tanh,
)
from .adam import AdamState, adam_update
from .serial import load_params, save_params

__all__ = [
    "AdamState",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "adam_update",
    "add",
    "attention_apply",
    "attention_scores",
    "backward",
    "clip",
    "concat_last",
    "conv2d",
    "dense",
    "exp",
    "gather_last",
    "load_params",
    "log_softmax",
    "lstm_step",
    "mean_all",
    "minimum",
    "mul",
    "relu",
    "reshape",
    "save_params",
    "scale",
    "sigmoid",
    "softmax",
    "spatial_mean",
    "sub",
    "sum_all",
    "sum_last",
    "tanh",
]
