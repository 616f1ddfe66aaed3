"""Tensor container and the reverse-mode differentiation driver.

Every op in :mod:`oseg.ops` builds a :class:`Tensor` whose ``_backward``
closure maps the upstream gradient to one gradient per parent. The graph is
walked in reverse topological order by :func:`backward`.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible.

    ``expected`` and ``got`` hold the two offending shapes.
    """

    def __init__(self, message: str, expected=None, got=None):
        super().__init__(message)
        self.expected = expected
        self.got = got


class NonFiniteError(ArithmeticError):
    """A loss or gradient went NaN/inf. ``where`` names the culprit."""

    def __init__(self, message: str, where=None):
        super().__init__(message)
        self.where = where


@contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense float64 array that can take part in a differentiation graph.

    Network activations are rank 4 ``(N, C, H, W)``; losses are rank 0.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        # np.ascontiguousarray would promote 0-d arrays to 1-d
        self.data = np.array(data, dtype=np.float64, order="C", copy=not isinstance(data, np.ndarray)
                             or data.dtype != np.float64 or not data.flags.c_contiguous)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"],
                backward_fn: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the ops module does the real work.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other) if isinstance(other, Tensor) else ops.add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            return ops.sub(self, other)
        return ops.add_scalar(self, -other)

    def __rsub__(self, other):
        from . import ops
        return ops.add_scalar(ops.scale(self, -1.0), other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other) if isinstance(other, Tensor) else ops.scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.scale(self, 1.0 / other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)


def _topo_order(root: Tensor) -> list:
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


def backward(loss: Tensor, inputs: Optional[Iterable[Tensor]] = None) -> Optional[list]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    If ``inputs`` is given, their gradients are also returned as a list;
    inputs the loss does not depend on get a zero array.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}",
                         expected=(), got=loss.shape)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if inputs is None:
        return None
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]
