"""Tensor type, graph recording and the reverse-mode traversal."""
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np


class NumericsError(Exception):
    pass


class DimensionError(NumericsError, ValueError):
    pass


class UnsupportedOpError(NumericsError, KeyError):
    pass


class ContractError(NumericsError, RuntimeError):
    pass


_state = threading.local()

_PRECISIONS = {"single": np.float32, "double": np.float64}


def default_dtype():
    return getattr(_state, "dtype", np.float32)


def is_grad_enabled():
    return getattr(_state, "grad", True)


@contextmanager
def precision(mode):
    """Switch the dtype used for newly created tensors ("single" or "double")."""
    if mode not in _PRECISIONS:
        raise ValueError(f"unknown precision mode {mode!r}")
    prev = default_dtype()
    _state.dtype = _PRECISIONS[mode]
    try:
        yield
    finally:
        _state.dtype = prev


@contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class Node:
    __slots__ = ("kind", "inputs", "backward_fn")

    def __init__(self, kind, inputs, backward_fn):
        self.kind = kind
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.node = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # operator sugar; implementations live in ops.py
    def __add__(self, o):
        return _ops().add(self, o)

    def __radd__(self, o):
        return _ops().add(o, self)

    def __sub__(self, o):
        return _ops().sub(self, o)

    def __rsub__(self, o):
        return _ops().sub(o, self)

    def __mul__(self, o):
        return _ops().mul(self, o)

    def __rmul__(self, o):
        return _ops().mul(o, self)

    def __truediv__(self, o):
        return _ops().div(self, o)

    def __neg__(self):
        return _ops().mul(self, -1.0)

    def __matmul__(self, o):
        return _ops().matmul(self, o)

    def __getitem__(self, idx):
        return _ops().getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return _ops().sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return _ops().mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _ops().transpose(self, axes or None)

    def backward(self, grad=None):
        backward(self, grad=grad)


def _ops():
    from . import ops
    return ops


def record(data, inputs, kind, backward_fn):
    """Wrap an op result; attach a graph node when any input needs a gradient."""
    out = Tensor._wrap(data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(kind, tuple(inputs), backward_fn)
    return out


@dataclass
class OpGraph:
    """Topologically ordered tensors that produced a loss (inputs first)."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss):
        order, seen = [], set()
        stack = [(loss, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for inp in t.node.inputs:
                    if inp.requires_grad and id(inp) not in seen:
                        stack.append((inp, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def ops(self):
        return [t.node.kind for t in self.nodes if t.node is not None]


def backward(loss, grad=None, graph=None):
    """Populate ``.grad`` of every leaf that requires a gradient.

    Leaf gradients accumulate across calls; call ``zero_grad`` to reset.
    """
    if grad is None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    graph = graph or OpGraph.from_loss(loss)
    grads = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for t in reversed(graph.nodes):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        in_grads = t.node.backward_fn(g)
        for inp, ig in zip(t.node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
