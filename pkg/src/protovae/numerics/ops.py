"""Differentiable elementwise, reduction and linear-algebra operations."""

from __future__ import annotations

import numpy as np

from ..errors import DomainError, ShapeError
from .tensor import Tensor, make_result


def _lift(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype) if dtype is not None else value)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary_operands(a, b):
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    if not isinstance(b, Tensor):
        b = _lift(b, a)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from None
    return a, b


# -- binary -------------------------------------------------------------------


def add(a, b):
    a, b = _binary_operands(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result("add", np.add, (a, b), a.data + b.data, backward)


def sub(a, b):
    a, b = _binary_operands(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result("sub", np.subtract, (a, b), a.data - b.data, backward)


def mul(a, b):
    a, b = _binary_operands(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result("mul", np.multiply, (a, b), a.data * b.data, backward)


def div(a, b):
    a, b = _binary_operands(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return make_result("div", np.divide, (a, b), out, backward)


def matmul(a, b):
    """Matrix product with numpy's batching rules (both operands >= 2-D)."""
    a, b = _binary_operands_matmul(a, b)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_result("matmul", np.matmul, (a, b), a.data @ b.data, backward)


def _binary_operands_matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.shape[-1]} vs {b.shape[-2]}",
            dim=a.ndim - 1,
        )
    return a, b


# -- unary --------------------------------------------------------------------


def neg(x):
    x = _lift(x)
    return make_result("neg", np.negative, (x,), -x.data, lambda g: (-g,))


def square(x):
    x = _lift(x)
    return make_result(
        "square", np.square, (x,), np.square(x.data), lambda g: (2.0 * x.data * g,)
    )


def exp(x):
    x = _lift(x)
    out = np.exp(x.data)
    return make_result("exp", np.exp, (x,), out, lambda g: (g * out,))


def log(x):
    x = _lift(x)
    if np.any(x.data <= 0):
        bad = int(np.argmax((x.data <= 0).ravel()))
        raise DomainError(
            f"log of non-positive value {x.data.ravel()[bad]!r} at flat index {bad}"
        )
    return make_result("log", np.log, (x,), np.log(x.data), lambda g: (g / x.data,))


def log1p(x):
    """``log(1 + x)``, accurate when ``x`` is tiny."""
    x = _lift(x)
    if np.any(x.data <= -1):
        bad = int(np.argmax((x.data <= -1).ravel()))
        raise DomainError(f"log1p of value {x.data.ravel()[bad]!r} <= -1 at flat index {bad}")
    return make_result("log1p", np.log1p, (x,), np.log1p(x.data), lambda g: (g / (1.0 + x.data),))


def tanh(x):
    x = _lift(x)
    out = np.tanh(x.data)
    return make_result("tanh", np.tanh, (x,), out, lambda g: (g * (1.0 - out * out),))


def relu(x):
    x = _lift(x)
    mask = x.data > 0
    fn = lambda a: np.maximum(a, 0)
    return make_result("relu", fn, (x,), np.where(mask, x.data, 0), lambda g: (g * mask,))


def leaky_relu(x, slope=0.01):
    x = _lift(x)
    pos = x.data > 0
    fn = lambda a: np.where(a > 0, a, a * a.dtype.type(slope))
    scale = np.where(pos, 1, slope).astype(x.dtype)
    return make_result(
        "leaky_relu", fn, (x,), fn(x.data), lambda g: (g * scale,), slope=slope
    )


def clamp_min(x, floor):
    """``max(x, floor)``; the gradient is zero where the floor is active."""
    x = _lift(x)
    keep = x.data >= floor
    fn = lambda a: np.maximum(a, a.dtype.type(floor))
    return make_result("clamp_min", fn, (x,), fn(x.data), lambda g: (g * keep,))


def softmax(x, axis=-1):
    x = _lift(x)

    def fn(a):
        e = np.exp(a - a.max(axis=axis, keepdims=True))
        return e / e.sum(axis=axis, keepdims=True)

    out = fn(x.data)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result("softmax", fn, (x,), out, backward, axis=axis)


# -- shape and reductions -----------------------------------------------------


def reshape(x, shape):
    x = _lift(x)
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}") from None
    fn = lambda a: a.reshape(shape)
    return make_result(
        "reshape", fn, (x,), out, lambda g: (g.reshape(x.shape),), shape=shape
    )


def swapaxes(x, a1, a2):
    x = _lift(x)
    fn = lambda a: np.swapaxes(a, a1, a2)
    return make_result("swapaxes", fn, (x,), fn(x.data), lambda g: (np.swapaxes(g, a1, a2),))


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    x = _lift(x)
    fn = lambda a: a.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result("sum", fn, (x,), fn(x.data), backward, axis=axis)


def mean(x, axis=None, keepdims=False):
    x = _lift(x)
    total = sum(x, axis=axis, keepdims=keepdims)
    count = x.size // max(total.size, 1)
    return mul(total, 1.0 / count)


def detach(x):
    return Tensor(_lift(x).data)


# -- layers -------------------------------------------------------------------


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` for ``x`` of shape (N, in) or (in,)."""
    x, weight = _lift(x), _lift(weight)
    if weight.ndim != 2:
        raise ShapeError(f"linear weight must be 2-D, got {weight.shape}")
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(
            f"linear: input has {x.shape[-1]} features, weight expects {weight.shape[1]}",
            dim=x.ndim - 1,
        )
    inputs = (x, weight) if bias is None else (x, weight, _lift(bias))
    if bias is not None and inputs[2].shape != (weight.shape[0],):
        raise ShapeError(
            f"linear bias shape {inputs[2].shape} != ({weight.shape[0]},)", dim=0
        )

    def fn(a, w, b=None):
        out = a @ w.T
        return out if b is None else out + b

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        a2 = x.data.reshape(-1, x.shape[-1])
        grads = [g @ weight.data, g2.T @ a2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    out = fn(*(t.data for t in inputs))
    return make_result("linear", fn, inputs, out, backward)


def pairwise_sqdist(z, protos):
    """Squared Euclidean distances between rows: (N, d), (P, d) -> (N, P)."""
    z, protos = _lift(z), _lift(protos)
    if z.ndim != 2 or protos.ndim != 2 or z.shape[1] != protos.shape[1]:
        raise ShapeError(
            f"pairwise_sqdist expects (N, d) and (P, d), got {z.shape} and {protos.shape}",
            dim=1,
        )

    def fn(a, p):
        diff = a[:, None, :] - p[None, :, :]
        return np.einsum("npd,npd->np", diff, diff)

    diff = z.data[:, None, :] - protos.data[None, :, :]
    out = np.einsum("npd,npd->np", diff, diff)

    def backward(g):
        weighted = 2.0 * g[:, :, None] * diff
        return weighted.sum(axis=1), -weighted.sum(axis=0)

    return make_result("pairwise_sqdist", fn, (z, protos), out, backward)
