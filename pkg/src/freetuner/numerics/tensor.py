"""Float64 tensors with a reverse-mode tape.

Every op in this package builds its output with :func:`_node`, which records
the parents and a closure mapping the output gradient to parent gradients.
Recording is skipped entirely inside :func:`no_grad`, which keeps inference
loops cheap.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

from ..errors import InvalidArgument

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def enable_grad():
    prev = grad_enabled()
    _state.enabled = True
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.size == 0:
            raise InvalidArgument("empty tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -- operator sugar ---------------------------------------------------
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
        return ops.mul(self, -1.0)

    def __pow__(self, p):
        from . import ops
        return ops.power(self, p)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops
        return ops.index(self, idx)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _toposort(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


class Gradients(list):
    """List of gradient arrays; ``detached`` is set when the root had no tape."""

    detached = False


def grad(root: Tensor, inputs=None) -> Gradients:
    """Reverse-mode gradient of a scalar ``root``.

    With ``inputs`` given, returns their gradients in order (zeros for inputs
    the root does not depend on). Without, accumulates into ``.grad`` of every
    leaf that requires grad and returns an empty list.
    """
    if not isinstance(root, Tensor):
        raise InvalidArgument("root must be a Tensor")
    if root.data.size != 1 or root.data.ndim != 0:
        raise InvalidArgument(f"gradient root must be a scalar, got shape {root.shape}")
    inputs = list(inputs) if inputs is not None else None

    if not root.requires_grad:
        out = Gradients(np.zeros_like(x.data) for x in (inputs or []))
        out.detached = True
        return out

    grads = {id(root): np.ones((), dtype=np.float64)}
    order = _toposort(root)
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    if inputs is not None:
        return Gradients(
            np.asarray(grads.get(id(x), np.zeros_like(x.data)), dtype=np.float64).reshape(x.shape)
            for x in inputs
        )
    for node in order:
        if not node._parents and id(node) in grads:
            g = np.asarray(grads[id(node)]).reshape(node.shape)
            node.grad = g if node.grad is None else node.grad + g
    return Gradients()


def backward(root: Tensor) -> None:
    grad(root)
