"""Dense tensors with reverse-mode automatic differentiation.

The graph is built dynamically as operations execute: every result that
depends on a ``requires_grad`` tensor carries a :class:`Node` linking it to
its inputs and a closure computing the vector-Jacobian product. Calling
:meth:`Tensor.backward` on a scalar walks the nodes once in reverse
topological order and frees the saved forward context afterwards.

Binary operations accept operands of identical shape, a per-channel vector
of shape ``(C,)`` against a tensor whose axis 1 has extent ``C``, or a plain
Python number. Anything else is rejected.
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "Tensor",
    "Node",
    "GraphConsumedError",
    "as_tensor",
    "elementwise",
    "topological_order",
    "finite_difference_gradient",
    "no_grad",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording graph nodes."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev

ELEMENTWISE_KINDS = ("add", "sub", "mul", "div", "relu", "sigmoid", "log", "neg")


class GraphConsumedError(RuntimeError):
    """Raised when backward() is called through nodes whose context was freed."""


@dataclass(eq=False)
class Node:
    """One operation record in the dynamic graph."""

    op: str
    inputs: tuple["Tensor", ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    consumed: bool = field(default=False)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if arr.ndim > 5:
            raise ValueError(f"rank {arr.ndim} exceeds the supported maximum of 5")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, node: Node | None) -> "Tensor":
        # internal constructor: no copy, result of an operation
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = node is not None
        out.grad = None
        out._node = node
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self.shape)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, None)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic sugar
    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("add", elementwise("neg", self), other)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", self, other)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __rtruediv__(self, other):
        if not _is_number(other):
            return NotImplemented
        return elementwise("mul", reciprocal(self), other)

    def __neg__(self):
        return elementwise("neg", self)

    def relu(self) -> "Tensor":
        return elementwise("relu", self)

    def sigmoid(self) -> "Tensor":
        return elementwise("sigmoid", self)

    def log(self) -> "Tensor":
        return elementwise("log", self)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return tensor_sum(self) * (1.0 / self.size)

    def clip(self, lo: float, hi: float) -> "Tensor":
        return clip(self, lo, hi)

    def backward(self) -> None:
        backward(self)


def _not_scalar(shape):
    raise ValueError(f"item() needs a single-element tensor, got shape {shape}")


def _is_number(x) -> bool:
    return isinstance(x, (int, float, np.integer, np.floating)) and not isinstance(x, bool)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{op} produced non-finite values")
    return arr


def make_result(arr: np.ndarray, op: str, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Wrap an operation result, attaching a graph node when any input needs grad."""
    _check_finite(arr, op)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        return Tensor._wrap(arr, Node(op, tuple(inputs), vjp))
    return Tensor._wrap(arr, None)


# broadcasting restricted to per-channel vectors


def _channel_view(vec: np.ndarray, ndim: int) -> np.ndarray:
    return vec.reshape((1, -1) + (1,) * (ndim - 2))


def _align(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray, tuple[int, ...]]:
    if a.shape == b.shape:
        return a, b, a.shape
    if b.ndim == 1 and a.ndim >= 2 and a.shape[1] == b.shape[0]:
        return a, _channel_view(b, a.ndim), a.shape
    if a.ndim == 1 and b.ndim >= 2 and b.shape[1] == a.shape[0]:
        return _channel_view(a, b.ndim), b, b.shape
    raise ValueError(
        f"shape mismatch: {a.shape} vs {b.shape} (only equal shapes or a per-channel vector are allowed)"
    )


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    axes = tuple(i for i in range(grad.ndim) if i != 1)
    return grad.sum(axis=axes)


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Apply one of ``add, sub, mul, div, relu, sigmoid, log, neg``.

    ``b`` is required for the binary kinds and may be a Tensor or a number.
    """
    if op_kind not in ELEMENTWISE_KINDS:
        raise ValueError(f"unknown elementwise kind {op_kind!r}")
    a = as_tensor(a)
    if op_kind in ("relu", "sigmoid", "log", "neg"):
        if b is not None:
            raise ValueError(f"{op_kind} is unary")
        return _unary(op_kind, a)
    if b is None:
        raise ValueError(f"{op_kind} needs two operands")
    if _is_number(b):
        return _with_scalar(op_kind, a, float(b))
    b = as_tensor(b)
    return _binary(op_kind, a, b)


def _unary(kind: str, a: Tensor) -> Tensor:
    x = a.data
    if kind == "neg":
        return make_result(-x, kind, (a,), lambda g: (-g,))
    if kind == "relu":
        mask = x > 0
        return make_result(np.where(mask, x, 0).astype(x.dtype, copy=False), kind, (a,), lambda g: (g * mask,))
    if kind == "sigmoid":
        y = _stable_sigmoid(x)
        return make_result(y, kind, (a,), lambda g: (g * y * (1 - y),))
    # log
    if np.any(x <= 0):
        raise ValueError("log of a non-positive value (clamp before taking the log)")
    return make_result(np.log(x), kind, (a,), lambda g: (g / x,))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _with_scalar(kind: str, a: Tensor, s: float) -> Tensor:
    x = a.data
    if kind == "add":
        return make_result(x + s, kind, (a,), lambda g: (g,))
    if kind == "sub":
        return make_result(x - s, kind, (a,), lambda g: (g,))
    if kind == "mul":
        return make_result(x * s, kind, (a,), lambda g: (g * s,))
    if s == 0:
        raise ZeroDivisionError("division of a tensor by zero")
    return make_result(x / s, kind, (a,), lambda g: (g / s,))


def _binary(kind: str, a: Tensor, b: Tensor) -> Tensor:
    x, y, _ = _align(a.data, b.data)
    sa, sb = a.shape, b.shape
    if kind == "add":
        out = x + y
        vjp = lambda g: (_reduce_to(g, sa), _reduce_to(g, sb))
    elif kind == "sub":
        out = x - y
        vjp = lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb))
    elif kind == "mul":
        out = x * y
        vjp = lambda g: (_reduce_to(g * y, sa), _reduce_to(g * x, sb))
    else:
        if np.any(y == 0):
            raise ZeroDivisionError("elementwise division by zero")
        out = x / y
        vjp = lambda g: (_reduce_to(g / y, sa), _reduce_to(-g * x / (y * y), sb))
    return make_result(out, kind, (a, b), vjp)


def reciprocal(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x == 0):
        raise ZeroDivisionError("reciprocal of zero")
    y = 1.0 / x
    return make_result(y, "reciprocal", (a,), lambda g: (-g * y * y,))


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    return make_result(out, "sum", (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only where the value was inside."""
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return make_result(np.clip(x, lo, hi), "clip", (a,), lambda g: (g * inside,))


# backward


def topological_order(root: Tensor) -> list[Node]:
    """Nodes reachable from ``root`` with every input preceding its consumer."""
    order: list[Node] = []
    seen: set[int] = set()
    if root._node is None:
        return order
    stack: list[tuple[Node, bool]] = [(root._node, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for t in node.inputs:
            if t._node is not None and id(t._node) not in seen:
                stack.append((t._node, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf tensor with ``requires_grad`` below ``loss``.

    Gradients accumulate into existing ``.grad`` buffers. The traversed nodes
    are freed; a second call through them raises :class:`GraphConsumedError`.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    if loss._node is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        return
    order = topological_order(loss)
    if any(n.consumed for n in order):
        raise GraphConsumedError("backward through a graph that was already consumed")

    grads: dict[int, np.ndarray] = {id(loss._node): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        vjp, node.vjp, node.consumed = node.vjp, None, True
        if g is None:
            continue
        for t, gi in zip(node.inputs, vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._node is None:
                t.grad = gi.astype(t.dtype, copy=True) if t.grad is None else t.grad + gi
            else:
                key = id(t._node)
                grads[key] = gi if key not in grads else grads[key] + gi
        node.inputs = ()


def finite_difference_gradient(f: Callable[[Tensor], Tensor | float], x: Tensor, eps: float = 1e-6) -> np.ndarray:
    """Central-difference estimate of ``df/dx``, one element at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(x.data, dtype=np.float64, copy=True)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)

    def evaluate(arr: np.ndarray) -> float:
        val = f(Tensor(arr.reshape(base.shape)))
        return float(val.data) if isinstance(val, Tensor) else float(val)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = evaluate(flat)
        flat[i] = orig - eps
        lo = evaluate(flat)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad
