"""Dense tensors with a reverse-mode differentiation record.

Every differentiable operation returns a new :class:`Tensor` that keeps a
reference to its inputs and a closure mapping the output gradient to input
gradients. Calling :meth:`Tensor.backward` on a scalar walks that graph in
reverse topological order.

Independently of gradient tracking, an active :class:`Tape` records every
operation in execution order together with the numpy function that produced
it. The tape is used to replay a forward pass and, by the LRP code, to read
back the activations entering each layer.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import ShapeError

_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


def get_default_dtype():
    return _get("dtype", np.float32)


def set_default_dtype(dtype):
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state.dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created tensors.

    ``float32`` is the training mode; ``float64`` exists for gradient checks.
    """
    previous = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


def is_grad_enabled():
    return _get("grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@dataclass
class TapeRecord:
    op: str
    inputs: tuple
    output: "Tensor"
    fn: Callable[..., np.ndarray]
    attrs: dict = field(default_factory=dict)


class Tape:
    """Ordered log of executed operations.

    Use as a context manager; tapes nest, and only the innermost one records.
    """

    def __init__(self):
        self.records: list[TapeRecord] = []

    def __enter__(self):
        stack = _get("tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        return False

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def record(self, op, inputs, output, fn, attrs):
        self.records.append(TapeRecord(op, tuple(inputs), output, fn, dict(attrs)))

    def producer(self, tensor):
        """Return the record whose output is ``tensor`` (or ``None``)."""
        for rec in reversed(self.records):
            if rec.output is tensor:
                return rec
        return None

    def replay(self, overrides=None):
        """Recompute every recorded output from the recorded leaves.

        ``overrides`` maps ``id(tensor)`` to a replacement array for that
        tensor. Returns a dict ``id(output) -> recomputed array``.
        """
        env = dict(overrides or {})
        for rec in self.records:
            args = [env.get(id(t), t.data) for t in rec.inputs]
            env[id(rec.output)] = rec.fn(*args)
        return env


def _active_tape():
    stack = _get("tapes", None)
    return stack[-1] if stack else None


class Tensor:
    """n-dimensional float array with optional gradient tracking."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=get_default_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self._consumed = False
        self.op = None

    # -- basic properties -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- arithmetic sugar; implementations live in ops ----------------------

    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    # -- differentiation ----------------------------------------------------

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf.

        The graph below ``self`` is released afterwards; a second call on the
        same forward raises ``RuntimeError``.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward needs a scalar output, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != {self.shape}")
        if self._consumed:
            raise RuntimeError("graph already consumed by a previous backward()")

        order = _topological(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            parent_grads = node._backward(g)
            node._backward = None
            node._consumed = True
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
            node._parents = ()


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=get_default_dtype()))


def make_result(op, fn, inputs: Sequence[Tensor], out_data, backward, **attrs):
    """Wrap ``out_data`` as the output of ``op`` applied to ``inputs``.

    ``backward`` maps the output gradient to a tuple of input gradients
    (``None`` for inputs that need none).
    """
    out = Tensor(out_data)
    out.op = op
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._parents = tuple(inputs)
        out._backward = backward
    tape = _active_tape()
    if tape is not None:
        tape.record(op, inputs, out, fn, attrs)
    return out
