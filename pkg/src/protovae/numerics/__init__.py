"""Tensor arithmetic and reverse-mode differentiation for the ProtoVAE network."""

from .tensor import (
    Tape,
    TapeRecord,
    Tensor,
    as_tensor,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    precision,
    set_default_dtype,
)
from .ops import (
    add,
    clamp_min,
    detach,
    div,
    exp,
    leaky_relu,
    linear,
    log,
    log1p,
    matmul,
    mean,
    mul,
    neg,
    pairwise_sqdist,
    relu,
    reshape,
    softmax,
    square,
    sub,
    sum,
    swapaxes,
    tanh,
)
from .conv import (
    avg_pool2d,
    conv2d,
    conv_output_size,
    conv_transpose2d,
    conv_transpose_output_size,
)


def parameter(data):
    """Leaf tensor that accumulates gradients."""
    return Tensor(data, requires_grad=True)


__all__ = [name for name in dir() if not name.startswith("_")]
