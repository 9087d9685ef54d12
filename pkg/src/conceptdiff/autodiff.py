"""Reverse-mode automatic differentiation over numpy arrays.

A small tape engine in the micrograd style, vectorized: each Tensor wraps a
float64 ndarray and remembers how to push an incoming gradient to its
parents. Only the operations the denoiser, projector, and loss modules need
are implemented. ``stop_gradient`` is a first-class node: values pass
through, gradients do not, and parameters reachable only through a stopped
branch receive an exactly-zero gradient.

Graphs are cheap to skip: an operation whose inputs carry no trainable
ancestor produces a constant node with no backward closure, so evaluation
over frozen parameters costs little more than plain numpy.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Node in the computation graph.

    ``data`` must not be mutated once the node participates in a graph.
    ``grad`` is populated by ``backward`` on the loss root; it is ``None``
    until then and exactly zero for nodes untouched by the loss.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[Array], None] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    # -- graph plumbing ----------------------------------------------------

    def _accumulate(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Backpropagate from this node; requires a scalar value."""
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar root, got shape {self.data.shape}"
            )
        if not np.isfinite(self.data):
            raise FloatingPointError("non-finite value at loss root")
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    # -- shape helpers -----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other, dtype=np.float64))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """Wrap a value as a non-trainable graph leaf."""
    return Tensor(x)


def stop_gradient(x: Tensor) -> Tensor:
    """Pass the value through, block the gradient. Always returns a constant node."""
    return Tensor(as_tensor(x).data)


# -- arithmetic --------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    if not (a.requires_grad or b.requires_grad):
        return Tensor(out)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return Tensor(out, _parents=(a, b), _backward=backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    if not (a.requires_grad or b.requires_grad):
        return Tensor(out)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return Tensor(out, _parents=(a, b), _backward=backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    if not (a.requires_grad or b.requires_grad):
        return Tensor(out)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor(out, _parents=(a, b), _backward=backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data
    if not (a.requires_grad or b.requires_grad):
        return Tensor(out)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return Tensor(out, _parents=(a, b), _backward=backward)


# -- elementwise -------------------------------------------------------------


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    if not x.requires_grad:
        return Tensor(out)

    def backward(g: Array) -> None:
        x._accumulate(g * (1.0 - out * out))

    return Tensor(out, _parents=(x,), _backward=backward)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    if not x.requires_grad:
        return Tensor(out)

    def backward(g: Array) -> None:
        x._accumulate(g * out)

    return Tensor(out, _parents=(x,), _backward=backward)


def log(x) -> Tensor:
    x = as_tensor(x)
    out = np.log(x.data)
    if not x.requires_grad:
        return Tensor(out)

    def backward(g: Array) -> None:
        x._accumulate(g / x.data)

    return Tensor(out, _parents=(x,), _backward=backward)


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    if not x.requires_grad:
        return Tensor(out)

    def backward(g: Array) -> None:
        x._accumulate(g * 0.5 / out)

    return Tensor(out, _parents=(x,), _backward=backward)


def absolute(x) -> Tensor:
    """|x| with subgradient 0 at x = 0."""
    x = as_tensor(x)
    out = np.abs(x.data)
    if not x.requires_grad:
        return Tensor(out)

    def backward(g: Array) -> None:
        x._accumulate(g * np.sign(x.data))

    return Tensor(out, _parents=(x,), _backward=backward)


def square(x) -> Tensor:
    x = as_tensor(x)
    return mul(x, x)


# -- reductions and reshaping -------------------------------------------------


def tsum(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    if not x.requires_grad:
        return Tensor(out)

    def backward(g: Array) -> None:
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.data.shape).copy())
        elif keepdims:
            x._accumulate(np.broadcast_to(g, x.data.shape).copy())
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy())

    return Tensor(out, _parents=(x,), _backward=backward)


def tmean(x) -> Tensor:
    x = as_tensor(x)
    return mul(tsum(x), 1.0 / x.data.size)


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    if not any(p.requires_grad for p in parts):
        return Tensor(out)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g: Array) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._accumulate(g[tuple(idx)])

    return Tensor(out, _parents=tuple(parts), _backward=backward)


def gather_rows(table: Tensor, indices) -> Tensor:
    """Select rows of a 2-d tensor; gradients scatter-add back into the rows."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.intp)
    out = table.data[idx]
    if not table.requires_grad:
        return Tensor(out)

    def backward(g: Array) -> None:
        acc = np.zeros_like(table.data)
        np.add.at(acc, idx, g)
        table._accumulate(acc)

    return Tensor(out, _parents=(table,), _backward=backward)


def sum_squares(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """sum(x^2) along an axis, as one node."""
    x = as_tensor(x)
    out = (x.data * x.data).sum(axis=axis, keepdims=keepdims)
    if not x.requires_grad:
        return Tensor(out)

    def backward(g: Array) -> None:
        if axis is None or keepdims:
            x._accumulate(2.0 * x.data * g)
        else:
            x._accumulate(2.0 * x.data * np.expand_dims(g, axis))

    return Tensor(out, _parents=(x,), _backward=backward)


def l2_normalize(x: Tensor, axis: int = -1, min_norm: float = 1e-12) -> Tensor:
    """Rows scaled to unit Euclidean norm; raises on a numerically zero row."""
    x = as_tensor(x)
    norms = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norms < min_norm):
        raise ValueError("cannot normalize a zero-norm vector")
    n = sqrt(sum_squares(x, axis=axis, keepdims=True))
    return div(x, n)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Numerically stable log-sum-exp; the max shift is treated as constant."""
    x = as_tensor(x)
    shift = np.max(x.data, axis=axis, keepdims=True)
    shifted = add(x, Tensor(-shift))
    s = log(tsum(exp(shifted), axis=axis, keepdims=True))
    out = add(s, Tensor(shift))
    if not keepdims:
        out = reshape(out, tuple(n for i, n in enumerate(out.data.shape) if i != (axis % out.data.ndim)))
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    if not x.requires_grad:
        return Tensor(out)

    def backward(g: Array) -> None:
        x._accumulate(g.reshape(x.data.shape))

    return Tensor(out, _parents=(x,), _backward=backward)


def transpose(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = x.data.T
    if not x.requires_grad:
        return Tensor(out)

    def backward(g: Array) -> None:
        x._accumulate(g.T)

    return Tensor(out, _parents=(x,), _backward=backward)


# -- parameter utilities -------------------------------------------------------


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
