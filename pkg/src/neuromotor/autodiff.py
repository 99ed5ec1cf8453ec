"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every value in the package (weights, latents, membrane potentials) lives in a
:class:`Node`.  Ops build a DAG; :func:`backward` walks it in reverse
creation order, which is a valid topological order because an op can only
consume nodes that already exist.

The spike nonlinearity is a Heaviside step in the forward pass and uses the
derivative of the fast sigmoid ``x / (1 + |x|)`` in the backward pass.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "ContractError",
    "NonFiniteError",
    "Node",
    "Tape",
    "parameter",
    "constant",
    "as_node",
    "matmul",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "clip",
    "nonlinear",
    "sigmoid",
    "tanh",
    "exp",
    "spike",
    "fast_sigmoid",
    "softmax",
    "sum",
    "mean",
    "reshape",
    "swapaxes",
    "concat",
    "stack",
    "take",
    "backward",
    "zero_grad",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


_ids = itertools.count()


class Node:
    """A value in the graph plus its accumulated gradient.

    ``value`` is never mutated after construction.  ``grad`` is populated by
    :func:`backward` and accumulates across calls until :func:`zero_grad`.
    """

    __slots__ = ("value", "_grad", "parents", "_backward", "requires_grad", "_id", "name")
    __array_priority__ = 1000  # make ndarray <op> Node dispatch to Node

    def __init__(
        self,
        value,
        parents: Sequence["Node"] = (),
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        requires_grad: bool = False,
        name: str | None = None,
    ):
        value = np.asarray(value, dtype=np.float64)
        if not np.isfinite(value).all():
            raise NonFiniteError(f"non-finite value produced{' in ' + name if name else ''}")
        self.value = value
        self._grad = None
        self.parents = tuple(parents)
        self._backward = backward_fn
        self.requires_grad = requires_grad
        self._id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g) -> None:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.value.shape:
            raise DimensionError(f"grad shape {g.shape} != value shape {self.value.shape}")
        self._grad = g

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> "Node":
        return swapaxes(self, -1, -2)


def parameter(value, name: str | None = None) -> Node:
    """A trainable leaf."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def constant(value, name: str | None = None) -> Node:
    return Node(value, requires_grad=False, name=name)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(value, parents: Sequence[Node], backward_fn, name=None) -> Node:
    needs = any(p.requires_grad for p in parents)
    return Node(value, parents if needs else (), backward_fn if needs else None, needs, name)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (the reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Node, b: Node) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Node:
    """Matrix product ``a @ b`` (batched over leading dims like ``np.matmul``)."""
    a, b = as_node(a), as_node(b)
    if a.value.ndim == 1 and b.value.ndim >= 2:  # row vector times matrix
        out = matmul(reshape(a, (1, a.shape[0])), b)
        return reshape(out, out.shape[:-2] + out.shape[-1:])
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape) if b.requires_grad else None
        return ga, gb

    return _make(av @ bv, (a, b), bw)


# ------------------------------------------------------------------ elementwise


def elementwise(a, b, kind: str) -> Node:
    """Broadcasting ``add``, ``sub`` or ``mul`` (Hadamard product)."""
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b)
    av, bv = a.value, b.value
    if kind == "add":
        out = av + bv

        def bw(g):
            return _unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)

    elif kind == "sub":
        out = av - bv

        def bw(g):
            return _unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)

    elif kind == "mul":
        out = av * bv

        def bw(g):
            ga = _unbroadcast(g * bv, av.shape) if a.requires_grad else None
            gb = _unbroadcast(g * av, bv.shape) if b.requires_grad else None
            return ga, gb

    else:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return _make(out, (a, b), bw)


def add(a, b) -> Node:
    return elementwise(a, b, "add")


def sub(a, b) -> Node:
    return elementwise(a, b, "sub")


def mul(a, b) -> Node:
    return elementwise(a, b, "mul")


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b)
    av, bv = a.value, b.value
    out = av / bv

    def bw(g):
        ga = _unbroadcast(g / bv, av.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * av / (bv * bv), bv.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def neg(a) -> Node:
    a = as_node(a)
    return _make(-a.value, (a,), lambda g: (-g,))


def clip(a, lo: float, hi: float) -> Node:
    """Clamp to ``[lo, hi]``; the gradient is zero where the clamp is active."""
    a = as_node(a)
    inside = (a.value >= lo) & (a.value <= hi)
    return _make(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------- nonlinearities


def sigmoid(a) -> Node:
    a = as_node(a)
    out = 0.5 * (np.tanh(0.5 * a.value) + 1.0)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Node:
    a = as_node(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,))


def _surrogate_grad(x: np.ndarray, scale: float) -> np.ndarray:
    d = 1.0 + scale * np.abs(x)
    return 1.0 / (d * d)


def spike(u, theta: float = 1.0, scale: float = 1.0) -> Node:
    """Heaviside ``u >= theta`` forward, fast-sigmoid surrogate backward.

    The backward rule is ``1 / (1 + scale*|u - theta|)**2``.
    """
    u = as_node(u)
    x = u.value - theta
    out = (x >= 0.0).astype(np.float64)
    return _make(out, (u,), lambda g: (g * _surrogate_grad(x, scale),))


def fast_sigmoid(u, theta: float = 1.0, scale: float = 1.0) -> Node:
    """Smooth stand-in for :func:`spike` with the identical backward rule.

    Forward is ``x / (1 + scale*|x|)`` with ``x = u - theta``, whose exact
    derivative is the spike surrogate.  Used as a reference forward so finite
    differences can check the surrogate path.
    """
    u = as_node(u)
    x = u.value - theta
    out = x / (1.0 + scale * np.abs(x))
    return _make(out, (u,), lambda g: (g * _surrogate_grad(x, scale),))


def nonlinear(a, kind: str, theta: float = 1.0, scale: float = 1.0) -> Node:
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "tanh":
        return tanh(a)
    if kind == "fastsigmoid_surrogate_spike":
        return spike(a, theta, scale)
    raise ValueError(f"unknown nonlinearity {kind!r}")


def softmax(a, axis: int = -1) -> Node:
    a = as_node(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw)


# ------------------------------------------------------------------- reductions


def sum(a, axis=None, keepdims: bool = False) -> Node:  # noqa: A001 - mirrors numpy
    a = as_node(a)
    shape = a.shape
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ---------------------------------------------------------------- shape plumbing


def reshape(a, shape) -> Node:
    a = as_node(a)
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return _make(out, (a,), lambda g: (g.reshape(old),))


def swapaxes(a, ax1: int, ax2: int) -> Node:
    a = as_node(a)
    return _make(np.swapaxes(a.value, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def concat(nodes: Sequence, axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    splits = np.cumsum([n.shape[axis] for n in nodes])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, nodes, bw)


def stack(nodes: Sequence, axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    try:
        out = np.stack([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    count = len(nodes)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(count))

    return _make(out, nodes, bw)


def take(a, index) -> Node:
    """Basic or advanced indexing with a scatter-add backward."""
    a = as_node(a)
    out = a.value[index]
    shape = a.shape
    basic = _is_basic(index)

    def bw(g):
        full = np.zeros(shape)
        if basic:  # no repeated positions, plain assignment suffices
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(out, (a,), bw)


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)


# ------------------------------------------------------------------- backward


class Tape:
    """Nodes reachable from a root, in creation (topological) order."""

    def __init__(self, nodes: Iterable[Node]):
        self.nodes = sorted(nodes, key=lambda n: n._id)

    @classmethod
    def record(cls, root: Node) -> "Tape":
        seen: dict[int, Node] = {}
        todo = [root]
        while todo:
            n = todo.pop()
            if n._id in seen:
                continue
            seen[n._id] = n
            todo.extend(p for p in n.parents if p.requires_grad)
        return cls(seen.values())

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Node) -> Tape:
    """Populate ``grad`` on every node reachable from the scalar ``loss``."""
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.record(loss)
    local: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.value)}
    for node in reversed(tape.nodes):
        g = local.get(node._id)
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = local.get(parent._id)
            local[parent._id] = pg if prev is None else prev + pg
    for node in tape.nodes:
        g = local.get(node._id)
        if g is not None:
            node._grad = g.copy() if node._grad is None else node._grad + g
    return tape


def zero_grad(nodes: Iterable[Node]) -> None:
    for n in nodes:
        n._grad = None
