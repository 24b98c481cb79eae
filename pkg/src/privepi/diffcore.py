"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Graph` records every operation eagerly: the forward value is computed
when the node is created, and :meth:`Graph.backward` walks the tape in reverse
to accumulate adjoints into a fresh :class:`GradStore`. Graphs are cheap and
meant to be rebuilt for each forward pass; trainable weights live outside the
graph as plain numpy arrays and enter through :meth:`Graph.param`.

Example::

    g = Graph()
    x = g.param(2.0, "x")
    y = g.param(3.0, "y")
    grads = g.backward(x * y)
    grads[x], grads[y]   # (3.0, 2.0)
"""

from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.special import expit

# Smoothing constant for abs_smooth(x) = sqrt(x^2 + kappa^2).
ABS_KAPPA = 1e-8


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an operation's shape rule."""


class Node:
    """One record on the tape. Holds its eagerly computed forward value."""

    __slots__ = ("graph", "id", "kind", "inputs", "value", "attrs", "requires_grad", "name")

    # numpy defers mixed ndarray/Node arithmetic to the reflected Node methods
    __array_ufunc__ = None

    def __init__(self, graph, id, kind, inputs, value, attrs, requires_grad, name=None):
        self.graph = graph
        self.id = id
        self.kind = kind
        self.inputs = inputs
        self.value = value
        self.attrs = attrs
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Node(id={self.id}, kind={self.kind!r}, shape={self.value.shape})"

    def __add__(self, other):
        return self.graph.apply("add", self, other)

    def __radd__(self, other):
        return self.graph.apply("add", other, self)

    def __sub__(self, other):
        return self.graph.apply("sub", self, other)

    def __rsub__(self, other):
        return self.graph.apply("sub", other, self)

    def __mul__(self, other):
        return self.graph.apply("mul", self, other)

    def __rmul__(self, other):
        return self.graph.apply("mul", other, self)

    def __truediv__(self, other):
        return self.graph.apply("div", self, other)

    def __rtruediv__(self, other):
        return self.graph.apply("div", other, self)

    def __neg__(self):
        return self.graph.apply("neg", self)

    def __matmul__(self, other):
        other_ndim = other.value.ndim if isinstance(other, Node) else np.ndim(other)
        kind = "matvec" if other_ndim == 1 else "matmul"
        return self.graph.apply(kind, self, other)

    def __rmatmul__(self, other):
        kind = "matvec" if self.value.ndim == 1 else "matmul"
        return self.graph.apply(kind, other, self)

    def __getitem__(self, index):
        return self.graph.apply("slice", self, index=index)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- forward rules -----------------------------------------------------------

def _f_add(v, at):
    _broadcast_shape("add", *v)
    return v[0] + v[1]


def _f_sub(v, at):
    _broadcast_shape("sub", *v)
    return v[0] - v[1]


def _f_mul(v, at):
    _broadcast_shape("mul", *v)
    return v[0] * v[1]


def _f_div(v, at):
    _broadcast_shape("div", *v)
    return v[0] / v[1]


def _f_matvec(v, at):
    a, x = v
    if a.ndim != 2 or x.ndim != 1 or a.shape[1] != x.shape[0]:
        raise ShapeError(f"matvec: expected (m, n) and (n,), got {a.shape} and {x.shape}")
    return a @ x


def _f_matmul(v, at):
    a, b = v
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: expected (m, n) and (n, p), got {a.shape} and {b.shape}")
    return a @ b


def _f_sum(v, at):
    return np.sum(v[0], axis=at.get("axis"))


def _f_mean(v, at):
    return np.mean(v[0], axis=at.get("axis"))


def _f_concat(v, at):
    axis = at.get("axis", 0)
    try:
        return np.concatenate(v, axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in v]} on axis {axis}") from None


def _f_stack(v, at):
    try:
        return np.stack(v, axis=at.get("axis", 0))
    except ValueError:
        raise ShapeError(f"stack: incompatible shapes {[x.shape for x in v]}") from None


def _f_slice(v, at):
    try:
        return np.array(v[0][at["index"]], dtype=np.float64)
    except IndexError as exc:
        raise ShapeError(f"slice: index {at['index']!r} invalid for shape {v[0].shape}: {exc}") from None


def _f_reshape(v, at):
    try:
        return v[0].reshape(at["shape"])
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {v[0].shape} to {at['shape']}") from None


_FORWARD = {
    "add": _f_add,
    "sub": _f_sub,
    "mul": _f_mul,
    "div": _f_div,
    "neg": lambda v, at: -v[0],
    "matvec": _f_matvec,
    "matmul": _f_matmul,
    "sum": _f_sum,
    "mean": _f_mean,
    "sigmoid": lambda v, at: expit(v[0]),
    "tanh": lambda v, at: np.tanh(v[0]),
    "relu": lambda v, at: np.maximum(v[0], 0.0),
    "exp": lambda v, at: np.exp(v[0]),
    "softplus": lambda v, at: np.logaddexp(0.0, v[0]),
    "concat": _f_concat,
    "stack": _f_stack,
    "slice": _f_slice,
    "reshape": _f_reshape,
    "square": lambda v, at: v[0] * v[0],
    "abs_smooth": lambda v, at: np.sqrt(v[0] * v[0] + ABS_KAPPA * ABS_KAPPA),
}


# -- vector-Jacobian products ------------------------------------------------
# Each rule returns one gradient per input; entries for inputs that do not
# require a gradient may be None.

def _b_add(g, out, v, at, need):
    return [_unbroadcast(g, v[0].shape) if need[0] else None,
            _unbroadcast(g, v[1].shape) if need[1] else None]


def _b_sub(g, out, v, at, need):
    return [_unbroadcast(g, v[0].shape) if need[0] else None,
            _unbroadcast(-g, v[1].shape) if need[1] else None]


def _b_mul(g, out, v, at, need):
    return [_unbroadcast(g * v[1], v[0].shape) if need[0] else None,
            _unbroadcast(g * v[0], v[1].shape) if need[1] else None]


def _b_div(g, out, v, at, need):
    a, b = v
    return [_unbroadcast(g / b, a.shape) if need[0] else None,
            _unbroadcast(-g * a / (b * b), b.shape) if need[1] else None]


def _b_matvec(g, out, v, at, need):
    a, x = v
    return [np.outer(g, x) if need[0] else None, a.T @ g if need[1] else None]


def _b_matmul(g, out, v, at, need):
    a, b = v
    return [g @ b.T if need[0] else None, a.T @ g if need[1] else None]


def _b_sum(g, out, v, at, need):
    axis = at.get("axis")
    x = v[0]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return [np.broadcast_to(g, x.shape).copy()]


def _b_mean(g, out, v, at, need):
    axis = at.get("axis")
    x = v[0]
    n = x.size if axis is None else x.shape[axis]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return [np.broadcast_to(g / n, x.shape).copy()]


def _b_concat(g, out, v, at, need):
    axis = at.get("axis", 0)
    bounds = np.cumsum([x.shape[axis] for x in v])[:-1]
    return np.split(g, bounds, axis=axis)


def _b_stack(g, out, v, at, need):
    axis = at.get("axis", 0)
    return [np.take(g, i, axis=axis) if need[i] else None for i in range(len(v))]


def _b_slice(g, out, v, at, need):
    full = np.zeros_like(v[0])
    np.add.at(full, at["index"], g)
    return [full]


_BACKWARD = {
    "add": _b_add,
    "sub": _b_sub,
    "mul": _b_mul,
    "div": _b_div,
    "neg": lambda g, out, v, at, need: [-g],
    "matvec": _b_matvec,
    "matmul": _b_matmul,
    "sum": _b_sum,
    "mean": _b_mean,
    "sigmoid": lambda g, out, v, at, need: [g * out * (1.0 - out)],
    "tanh": lambda g, out, v, at, need: [g * (1.0 - out * out)],
    "relu": lambda g, out, v, at, need: [g * (v[0] > 0.0)],
    "exp": lambda g, out, v, at, need: [g * out],
    "softplus": lambda g, out, v, at, need: [g * expit(v[0])],
    "concat": _b_concat,
    "stack": _b_stack,
    "slice": _b_slice,
    "reshape": lambda g, out, v, at, need: [g.reshape(v[0].shape)],
    "square": lambda g, out, v, at, need: [2.0 * g * v[0]],
    "abs_smooth": lambda g, out, v, at, need: [g * v[0] / out],
}



def register_op(kind: str, forward: Callable, backward: Callable) -> None:
    """Add a primitive. ``forward(values, attrs)`` returns the output array;
    ``backward(g, out, values, attrs, need)`` returns one gradient per input."""
    if kind in _FORWARD:
        raise ValueError(f"op {kind!r} already registered")
    _FORWARD[kind] = forward
    _BACKWARD[kind] = backward


def supported_ops() -> tuple[str, ...]:
    return tuple(sorted(_FORWARD))


class GradStore:
    """Adjoints produced by one backward pass. Unused nodes read as zeros."""

    def __init__(self, graph: "Graph", adjoints: list):
        self._graph = graph
        self._adj = adjoints

    def __getitem__(self, node: Node) -> np.ndarray:
        a = self._adj[node.id] if node.id < len(self._adj) else None
        if a is None:
            return np.zeros_like(node.value)
        return a

    def params(self) -> dict[str, np.ndarray]:
        """Gradients of every named trainable leaf, keyed by name."""
        return {n.name: self[n] for n in self._graph.params}


class Graph:
    """Append-only computation tape.

    Single writer while the forward pass is being built; afterwards the graph
    is read-only and several backward passes may run over it.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def _push(self, kind, inputs, value, attrs, requires_grad, name=None):
        node = Node(self, len(self.nodes), kind, inputs, value, attrs, requires_grad, name)
        self.nodes.append(node)
        return node

    def constant(self, value, name: str | None = None) -> Node:
        return self._push("const", (), np.asarray(value, dtype=np.float64), None, False, name)

    def param(self, value, name: str | None = None) -> Node:
        """A trainable leaf; its gradient is reported by :meth:`GradStore.params`."""
        node = self._push("param", (), np.array(value, dtype=np.float64), None, True, name)
        self.params.append(node)
        return node

    def lift(self, x) -> Node:
        if isinstance(x, Node):
            if x.graph is not self:
                raise ValueError("node belongs to a different graph")
            return x
        return self.constant(x)

    def apply(self, kind: str, *inputs, **attrs) -> Node:
        """Record ``kind`` applied to ``inputs`` and compute its value now."""
        try:
            fwd = _FORWARD[kind]
        except KeyError:
            raise ValueError(f"unknown op {kind!r}; supported: {', '.join(supported_ops())}") from None
        nodes = tuple(self.lift(x) for x in inputs)
        value = fwd([n.value for n in nodes], attrs)
        if not isinstance(value, np.ndarray) or value.dtype != np.float64:
            value = np.asarray(value, dtype=np.float64)
        requires_grad = any(n.requires_grad for n in nodes)
        return self._push(kind, nodes, value, attrs, requires_grad)

    def backward(self, root: Node) -> GradStore:
        """Reverse sweep from a scalar ``root``; returns d(root)/d(node) for all nodes."""
        if root.graph is not self:
            raise ValueError("root belongs to a different graph")
        if root.value.size != 1:
            raise ShapeError(f"backward: root must be scalar, got shape {root.value.shape}")
        adj: list = [None] * (root.id + 1)
        adj[root.id] = np.ones_like(root.value)
        nodes = self.nodes
        for i in range(root.id, -1, -1):
            g = adj[i]
            if g is None:
                continue
            node = nodes[i]
            if not node.inputs or not node.requires_grad:
                continue
            need = [n.requires_grad for n in node.inputs]
            grads = _BACKWARD[node.kind](g, node.value, [n.value for n in node.inputs], node.attrs, need)
            for inp, gi, nd in zip(node.inputs, grads, need):
                if not nd or gi is None:
                    continue
                prev = adj[inp.id]
                adj[inp.id] = gi if prev is None else prev + gi
        return GradStore(self, adj)


# -- functional spellings ----------------------------------------------------

def _graph_of(*xs) -> Graph:
    for x in xs:
        if isinstance(x, Node):
            return x.graph
    raise TypeError("at least one operand must be a Node")


def forward_op(kind: str, *inputs, **attrs) -> Node:
    return _graph_of(*inputs).apply(kind, *inputs, **attrs)


def matvec(a, x) -> Node:
    return _graph_of(a, x).apply("matvec", a, x)


def matmul(a, b) -> Node:
    return _graph_of(a, b).apply("matmul", a, b)


def sum(x: Node, axis: int | None = None) -> Node:  # noqa: A001
    return x.graph.apply("sum", x, axis=axis)


def mean(x: Node, axis: int | None = None) -> Node:
    return x.graph.apply("mean", x, axis=axis)


def sigmoid(x: Node) -> Node:
    return x.graph.apply("sigmoid", x)


def tanh(x: Node) -> Node:
    return x.graph.apply("tanh", x)


def relu(x: Node) -> Node:
    return x.graph.apply("relu", x)


def exp(x: Node) -> Node:
    return x.graph.apply("exp", x)


def softplus(x: Node) -> Node:
    return x.graph.apply("softplus", x)


def square(x: Node) -> Node:
    return x.graph.apply("square", x)


def abs_smooth(x: Node) -> Node:
    return x.graph.apply("abs_smooth", x)


def concat(xs, axis: int = 0) -> Node:
    return _graph_of(*xs).apply("concat", *xs, axis=axis)


def stack(xs, axis: int = 0) -> Node:
    return _graph_of(*xs).apply("stack", *xs, axis=axis)


def reshape(x: Node, shape) -> Node:
    return x.graph.apply("reshape", x, shape=tuple(shape))


def check_gradient(f: Callable, x, h: float = 1e-5) -> float:
    """Largest relative disagreement between reverse-mode and central-difference gradients.

    ``f(graph, leaf)`` must build a scalar node from ``leaf``. ``x`` is either an
    array (``leaf`` is then one param node) or a dict of arrays (``leaf`` is a
    dict of param nodes with the same keys). The error for coordinate i is
    ``|g_ad - g_fd| / max(1, |g_fd|)``.
    """
    as_dict = isinstance(x, dict)
    point = {k: np.array(v, dtype=np.float64) for k, v in (x.items() if as_dict else [(None, x)])}

    def build(values):
        g = Graph()
        leaves = {k: g.param(v, name=str(k)) for k, v in values.items()}
        out = f(g, leaves if as_dict else leaves[None])
        if out.value.size != 1:
            raise ShapeError(f"check_gradient: f must return a scalar, got shape {out.value.shape}")
        if not np.isfinite(out.value).all():
            raise FloatingPointError("check_gradient: f is not finite at a probe point")
        return g, leaves, out

    g, leaves, out = build(point)
    grads = g.backward(out)
    worst = 0.0
    for key, base in point.items():
        analytic = grads[leaves[key]].ravel()
        for i in range(base.size):
            probe = dict(point)
            shifted = base.copy()
            shifted.flat[i] = base.flat[i] + h
            probe[key] = shifted
            f_plus = build(probe)[2].item()
            shifted = base.copy()
            shifted.flat[i] = base.flat[i] - h
            probe[key] = shifted
            f_minus = build(probe)[2].item()
            fd = (f_plus - f_minus) / (2.0 * h)
            worst = max(worst, abs(analytic[i] - fd) / max(1.0, abs(fd)))
    return worst
