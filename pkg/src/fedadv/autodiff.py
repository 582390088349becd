"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation returns a new :class:`Tensor` that remembers its inputs and a
closure computing input gradients from the output gradient.  Tensors carry a
monotonically increasing creation index, so sorting the nodes reachable from a
loss by that index recovers the order in which they were recorded; replaying
that list backwards is a valid reverse topological traversal.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, UsageError

_creation_counter = itertools.count()

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A float64 array that participates in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_index", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and 0 in arr.shape:
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: BackwardFn | None = _backward
        self._index = next(_creation_counter)
        self.op = op
        # leaves own a persistent grad buffer; intermediates only see grads transiently
        self.grad = np.zeros_like(arr) if (self.requires_grad and not self._parents) else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def constant(data) -> Tensor:
    """Wrap ``data`` as a tensor that never receives gradient."""
    if isinstance(data, Tensor):
        return data.detach()
    return Tensor(data, requires_grad=False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, requires_grad=False, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)


class Tape:
    """Nodes reachable from a loss, in recording order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        seen: dict[int, Tensor] = {}
        stack = [loss]
        while stack:
            node = stack.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen[id(node)] = node
            stack.extend(node._parents)
        return cls(sorted(seen.values(), key=lambda t: t._index))

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, seed_grad: np.ndarray) -> None:
        if not self.nodes:
            return
        pending: dict[int, np.ndarray] = {id(self.nodes[-1]): seed_grad}
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = node.grad + g if node.grad is not None else g.copy()
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    Tape.from_loss(loss).replay(np.ones_like(loss.data))


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------- operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def _bw(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return _make(ad @ bd, (a, b), _bw, "matmul")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a 1-D bias across the last axis of a 2-D tensor."""
    x, bias = _as_tensor(x), _as_tensor(bias)
    if x.data.ndim != 2 or bias.data.ndim != 1 or bias.shape[0] != x.shape[1]:
        raise DimensionError(f"bias of shape {bias.shape} does not broadcast over {x.shape}")

    def _bw(g):
        return (g, g.sum(axis=0) if bias.requires_grad else None)

    return _make(x.data + bias.data, (x, bias), _bw, "add_bias")


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op} needs equal shapes, got {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x: Tensor, factor: float) -> Tensor:
    x = _as_tensor(x)
    factor = float(factor)
    return _make(x.data * factor, (x,), lambda g: (g * factor,), "scale")


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0.0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def total(x: Tensor) -> Tensor:
    """Sum of all elements, as a 0-d tensor."""
    x = _as_tensor(x)
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape, n = x.shape, x.data.size
    return _make(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / n),), "mean")


def sum_sq(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    return _make(np.asarray(np.sum(xd * xd)), (x,), lambda g: (2.0 * g * xd,), "sum_sq")


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax of a 2-D tensor."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"log_softmax expects a 2-D tensor, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)

    def _bw(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return _make(out, (x,), _bw, "log_softmax")


def grad_reverse(x: Tensor, lam: float) -> Tensor:
    """Identity forward; multiplies the incoming gradient by ``-lam`` on the way back."""
    x = _as_tensor(x)
    lam = float(lam)
    if not lam >= 0.0:
        raise ConfigError(f"gradient reversal strength must be >= 0, got {lam}")
    factor = -lam
    return _make(x.data, (x,), lambda g: (g * factor,), "grad_reverse")
