"""Small reverse-mode tensor kernel: the primitives the Siamese-GAP model needs.

The conv im2col/col2im kernels come from a compiled module when it is
available (``BACKEND == "cython"``) and from numpy otherwise.
"""
from ._backend import BACKEND
from .gradcheck import CheckReport, finite_difference_check
from .ops import (
    BatchNormStats,
    add,
    affine,
    batch_norm,
    clip,
    concat,
    conv2d,
    div,
    dropout,
    gather,
    global_average_pool,
    global_max_pool,
    log,
    mean,
    mul,
    power,
    relu,
    reshape,
    softmax,
    sub,
    take_rows,
)
from .ops import sum as tsum
from .tensor import Tape, Tensor, as_tensor, backward, current_tape

__all__ = [
    "BACKEND",
    "BatchNormStats",
    "CheckReport",
    "Tape",
    "Tensor",
    "add",
    "affine",
    "as_tensor",
    "backward",
    "batch_norm",
    "clip",
    "concat",
    "conv2d",
    "current_tape",
    "div",
    "dropout",
    "finite_difference_check",
    "gather",
    "global_average_pool",
    "global_max_pool",
    "log",
    "mean",
    "mul",
    "power",
    "relu",
    "reshape",
    "softmax",
    "sub",
    "take_rows",
    "tsum",
]
