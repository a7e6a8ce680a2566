"""Reverse-mode automatic differentiation over dense float64 matrices.

Every value is a 2-D array. Operations build a graph of :class:`Tensor`
nodes; :func:`backward` orders the reachable nodes by creation sequence
(a valid topological order) and sweeps them once in reverse.

Only row/column-vector broadcasting is supported.
"""
from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_sequence = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class Tensor:
    __slots__ = ("value", "requires_grad", "grad", "op", "_parents", "_backward", "_seq")

    def __init__(self, value, requires_grad: bool = False, *, op: str = "leaf",
                 _parents: tuple = (), _backward: Callable | None = None):
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {arr.shape}")
        self.value = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents = _parents
        self._backward = _backward
        self._seq = next(_sequence)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.value[0, 0])

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(value) -> Tensor:
    return Tensor(value)


def parameter(value) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64, copy=True), requires_grad=True)


def record(value: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    """Register a custom operation. ``backward(g)`` returns one gradient per parent.

    Nodes without a differentiable input are plain constants: nothing is recorded.
    """
    if not any(p.requires_grad for p in parents):
        return Tensor(value, op=op)
    return Tensor(value, requires_grad=True, op=op, _parents=parents, _backward=backward)


class Tape:
    """Ordered record of the operations reachable from an output.

    Built lazily from the graph: node creation order is a topological
    order because inputs always exist before the op that consumes them.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def of(cls, output: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [output]
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(output: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(output)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns a map from each differentiable leaf to its accumulated gradient.
    """
    if output.shape != (1, 1):
        raise ShapeError(f"backward needs a scalar (1x1) output, got {output.shape}")
    if not output.requires_grad:
        return {}
    tape = Tape.of(output)
    adjoints: dict[int, np.ndarray] = {id(output): np.ones((1, 1))}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = adjoints.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        grads = node._backward(g)
        for parent, pg in zip(node._parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in adjoints:
                adjoints[key] = adjoints[key] + pg
            else:
                adjoints[key] = pg
    return leaves


def sgd_step(params: Sequence[Tensor], learning_rate: float) -> Sequence[Tensor]:
    """In-place ``p -= lr * p.grad`` followed by clearing the gradient."""
    if learning_rate <= 0:
        raise ValueError(f"learning rate must be positive, got {learning_rate}")
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"parameter {i} (shape {p.shape}) has no gradient")
    for p in params:
        p.value -= learning_rate * p.grad
        p.grad = None
    return params


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- shapes

def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple[int, int]:
    rows = _dim(op, a, b, 0)
    cols = _dim(op, a, b, 1)
    return rows, cols


def _dim(op: str, a: tuple, b: tuple, axis: int) -> int:
    if a[axis] == b[axis]:
        return a[axis]
    if a[axis] == 1:
        return b[axis]
    if b[axis] == 1:
        return a[axis]
    raise ShapeError(f"{op}: incompatible shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value

    def bw(g):
        return (g @ bv.T if a.requires_grad else None,
                av.T @ g if b.requires_grad else None)

    return record(av @ bv, "matmul", (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return record(a.value + b.value, "add", (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return record(a.value - b.value, "sub", (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a.shape, b.shape)
    av, bv = a.value, b.value

    def bw(g):
        return (_unbroadcast(g * bv, av.shape) if a.requires_grad else None,
                _unbroadcast(g * av, bv.shape) if b.requires_grad else None)

    return record(av * bv, "mul", (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("div", a.shape, b.shape)
    av, bv = a.value, b.value
    out = av / bv

    def bw(g):
        return (_unbroadcast(g / bv, av.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bv, bv.shape) if b.requires_grad else None)

    return record(out, "div", (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return record(-a.value, "neg", (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    return record(a.value * c, "scale", (a,), lambda g: (g * c,))


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    pos = a.value > 0
    out = np.where(pos, a.value, slope * a.value)
    return record(out, "leaky_relu", (a,), lambda g: (np.where(pos, g, slope * g),))


def relu(a: Tensor) -> Tensor:
    return leaky_relu(a, 0.0)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)
    return record(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    return record(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    av = a.value
    return record(np.log(av), "log", (a,), lambda g: (g / av,))


def softmax_rows(a: Tensor) -> Tensor:
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return record(out, "softmax_rows", (a,), bw)


def log_softmax_rows(a: Tensor) -> Tensor:
    z = a.value - a.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=1, keepdims=True),)

    return record(out, "log_softmax_rows", (a,), bw)


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = a.shape
    if axis is None:
        out = np.array([[a.value.sum()]])
    elif axis in (0, 1):
        out = a.value.sum(axis=axis, keepdims=True)
    else:
        raise ShapeError(f"sum: axis must be None, 0 or 1, got {axis}")
    return record(out, "sum", (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return record(np.concatenate([p.value for p in parts], axis=1), "concat_cols", parts, bw)


def gather_rows(a: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: index must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for shape {a.shape}")
    rows = a.shape[0]

    def bw(g):
        out = np.zeros((rows, g.shape[1]))
        np.add.at(out, idx, g)
        return (out,)

    return record(a.value[idx], "gather_rows", (a,), bw)


def scatter_add_rows(a: Tensor, index, num_rows: int) -> Tensor:
    """Row ``i`` of ``a`` is added into output row ``index[i]``."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != (a.shape[0],):
        raise ShapeError(f"scatter_add_rows: index shape {idx.shape} does not match {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
        raise ShapeError(f"scatter_add_rows: index out of range for {num_rows} rows")
    out = np.zeros((num_rows, a.shape[1]))
    np.add.at(out, idx, a.value)
    return record(out, "scatter_add_rows", (a,), lambda g: (g[idx],))


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity, shape ``(rows, 1)``.

    Rows with zero norm on either side have similarity 0 and zero gradient.
    """
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: shapes differ {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    na = np.sqrt((av * av).sum(axis=1, keepdims=True))
    nb = np.sqrt((bv * bv).sum(axis=1, keepdims=True))
    ok = (na > 0) & (nb > 0)
    safe_na = np.where(ok, na, 1.0)
    safe_nb = np.where(ok, nb, 1.0)
    dot = (av * bv).sum(axis=1, keepdims=True)
    out = np.where(ok, dot / (safe_na * safe_nb), 0.0)

    def bw(g):
        g = np.where(ok, g, 0.0)
        ga = g * (bv / (safe_na * safe_nb) - out * av / (safe_na * safe_na))
        gb = g * (av / (safe_na * safe_nb) - out * bv / (safe_nb * safe_nb))
        return ga, gb

    return record(out, "cosine_similarity", (a, b), bw)


def clip(a: Tensor, lo, hi) -> Tensor:
    """Clamp elementwise to constant bounds; gradient passes only where unclipped."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    out = np.minimum(np.maximum(a.value, lo), hi)
    inside = (a.value >= lo) & (a.value <= hi)
    return record(out, "clip", (a,), lambda g: (np.where(inside, g, 0.0),))


# ---------------------------------------------------------------- composites

def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of row-softmax(logits) against integer labels."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    rows, classes = logits.shape
    if labels.shape[0] != rows:
        raise ShapeError(f"cross_entropy: {labels.shape[0]} labels for {rows} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"cross_entropy: label out of range [0, {classes})")
    onehot = np.zeros((rows, classes))
    onehot[np.arange(rows), labels] = 1.0
    return scale(sum(mul(log_softmax_rows(logits), Tensor(onehot))), -1.0 / rows)


def segment_softmax(scores: Tensor, segments, num_segments: int) -> Tensor:
    """Softmax of a column of scores within groups sharing a segment id."""
    seg = np.asarray(segments, dtype=np.int64)
    peak = np.full(num_segments, -np.inf)
    np.maximum.at(peak, seg, scores.value[:, 0])
    # The per-segment shift is a constant; softmax is invariant to it.
    shifted = sub(scores, Tensor(peak[seg].reshape(-1, 1)))
    e = exp(shifted)
    denom = gather_rows(scatter_add_rows(e, seg, num_segments), seg)
    return div(e, denom)
