"""Float64 tensors, reverse-mode autodiff, AdamW and tensor blob I/O."""

from . import blob
from .optim import AdamWState, NonFiniteGradient, adamw_step
from .rng import stream
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    add_scalar,
    as_tensor,
    attention,
    backward,
    broadcast_to,
    concat,
    exp,
    gelu,
    grad,
    layer_norm,
    linear,
    matmul,
    mean,
    mul,
    repeat,
    reshape,
    scale,
    set_finite_checks,
    slice_,
    softmax,
    split,
    square,
    sub,
    sum_,
    tanh,
    topological_order,
    transpose,
)
