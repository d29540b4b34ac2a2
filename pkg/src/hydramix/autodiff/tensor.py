"""Define-by-run reverse-mode autodiff over numpy arrays.

Every op that touches a ``requires_grad`` input records its parents and a
closure mapping the output gradient to one gradient per parent. ``backward``
walks that record in reverse topological order once, then frees it.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

from ..errors import ContractError, DimensionError, GraphError, NumericalError

_state = threading.local()


def _flag(name, default):
    return getattr(_state, name, default)


def get_default_dtype():
    return _flag("dtype", np.float32)


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the storage dtype of newly created tensors (gradient checks use float64)."""
    prev = get_default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def is_grad_enabled():
    return _flag("grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=get_default_dtype(), copy=None)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = None
        self._consumed = False

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
    def is_leaf(self):
        return self._op is None

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division by a tensor is not supported; multiply by a constant instead")
        return mul(self, 1.0 / np.asarray(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data, parents, backward_fn, op):
    """Wrap ``data`` as an op output, recording the graph edge when gradients are needed."""
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), backward, "mul")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return make_result(a.data @ b.data, (a, b), backward, "matmul")


def getitem(x, index):
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int)) or i is Ellipsis for i in parts)

    def backward(g):
        out = np.zeros_like(x.data)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return make_result(x.data[index], (x,), backward, "getitem")


def topological_order(root):
    """Nodes reachable from ``root`` ordered so every node follows its parents."""
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Populate ``.grad`` on every ``requires_grad`` leaf that ``loss`` depends on.

    The recorded graph is released afterwards; a second call on the same loss
    (or any loss sharing its interior nodes) raises ``GraphError``.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise ContractError(f"backward needs a scalar loss, got {shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor with requires_grad")
    order = topological_order(loss)
    for node in order:
        if node._consumed:
            raise GraphError("graph already used by a previous backward; run the forward pass again")

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is None:
                g = np.zeros_like(node.data)
            g = g.astype(node.data.dtype, copy=False)
            node.grad = g if node.grad is None else node.grad + g
            continue
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        node._consumed = True
        node._backward = None
        node._parents = ()


def check_finite(t, what="tensor"):
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(data)):
        bad = int(np.size(data) - np.count_nonzero(np.isfinite(data)))
        raise NumericalError(f"{what} has {bad} non-finite value(s)")
    return t
