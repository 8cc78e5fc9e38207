"""Minimal reverse-mode differentiation over dense float64 arrays.

The graph is a tape rebuilt on every forward pass. Each :class:`Node` keeps its
value, an accumulated gradient of the same shape, its operands, and a local
backward rule mapping the output adjoint to one adjoint per operand.

Broadcasting is limited to two cases: a 0-d scalar against any array, and a
1-d row vector added to every row of a matrix.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

LOG_FLOOR = 1e-12


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "op")

    def __init__(
        self,
        value,
        parents: Sequence["Node"] = (),
        backward_fn: Callable | None = None,
        op: str = "leaf",
    ) -> None:
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape})"

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def T(self) -> "Node":
        return transpose(self)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_node(other), self)

    def __sub__(self, other):
        return add(self, neg(as_node(other)))

    def __rsub__(self, other):
        return add(as_node(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, Node):
            return mul(self, reciprocal(other))
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, as_node(other))

    def __getitem__(self, index):
        return index_scalar(self, index)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x, op="const")


def constant(x) -> Node:
    return Node(x, op="const")


def _shape_error(op: str, a: Node, b: Node) -> ValueError:
    return ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ----------------------------------------------------------------------------
# elementwise and structural primitives
# ----------------------------------------------------------------------------


def add(a: Node, b: Node) -> Node:
    """Sum of two nodes: equal shapes, ``b`` a 0-d scalar, or ``b`` a row vector."""
    a, b = as_node(a), as_node(b)
    if a.shape == b.shape:
        return Node(a.value + b.value, (a, b), lambda g: (g, g), "add")
    if b.value.ndim == 0:
        return Node(a.value + b.value, (a, b), lambda g: (g, g.sum()), "add")
    if a.value.ndim == 0:
        return Node(a.value + b.value, (a, b), lambda g: (g.sum(), g), "add")
    if a.value.ndim == 2 and b.value.ndim == 1 and b.shape[0] == a.shape[1]:
        return Node(a.value + b.value, (a, b), lambda g: (g, g.sum(axis=0)), "add")
    raise _shape_error("add", a, b)


def neg(a: Node) -> Node:
    return Node(-a.value, (a,), lambda g: (-g,), "neg")


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return Node(a.value * c, (a,), lambda g: (g * c,), "scale")


def mul(a: Node, b: Node) -> Node:
    """Elementwise product; either operand may be a 0-d scalar."""
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if a.shape == b.shape:
        return Node(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")
    if bv.ndim == 0:
        return Node(av * bv, (a, b), lambda g: (g * bv, (g * av).sum()), "mul")
    if av.ndim == 0:
        return Node(av * bv, (a, b), lambda g: ((g * bv).sum(), g * av), "mul")
    raise _shape_error("mul", a, b)


def reciprocal(a: Node) -> Node:
    out = 1.0 / a.value
    return Node(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return Node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Node) -> Node:
    """Natural log with the input floored at ``LOG_FLOOR``.

    Below the floor the output is constant, so the gradient there is zero.
    """
    x = a.value
    live = x > LOG_FLOOR
    safe = np.where(live, x, LOG_FLOOR)
    return Node(np.log(safe), (a,), lambda g: (np.where(live, g / safe, 0.0),), "log")


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return Node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Node) -> Node:
    # subgradient at exactly zero is taken as 0
    live = a.value > 0
    return Node(np.where(live, a.value, 0.0), (a,), lambda g: (g * live,), "relu")


def sum(a: Node, axis: int | None = None) -> Node:  # noqa: A001
    shape = a.shape
    if axis is None:
        return Node(a.value.sum(), (a,), lambda g: (np.full(shape, g),), "sum")
    out = a.value.sum(axis=axis)
    return Node(
        out, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),), "sum"
    )


def mean(a: Node, axis: int | None = None) -> Node:
    n = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def transpose(a: Node) -> Node:
    if a.value.ndim != 2:
        raise ValueError(f"transpose: expected a matrix, got shape {a.shape}")
    return Node(a.value.T.copy(), (a,), lambda g: (g.T,), "transpose")


def matmul(a: Node, b: Node) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2) or av.shape[-1] != bv.shape[0]:
        raise _shape_error("matmul", a, b)

    def rule(g):
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T, av.T @ g
        if av.ndim == 2:  # matrix @ vector
            return np.outer(g, bv), av.T @ g
        if bv.ndim == 2:  # vector @ matrix
            return bv @ g, np.outer(av, g)
        return g * bv, g * av

    return Node(av @ bv, (a, b), rule, "matmul")


def dot(a: Node, b: Node) -> Node:
    if a.value.ndim != 1 or a.shape != b.shape:
        raise _shape_error("dot", a, b)
    return matmul(a, b)


def l2norm_rows(a: Node) -> Node:
    """Scale every row (or a lone vector) to unit Euclidean norm."""
    x = a.value
    squeeze = x.ndim == 1
    x2 = x[None, :] if squeeze else x
    if x2.ndim != 2:
        raise ValueError(f"l2norm_rows: expected a vector or matrix, got shape {a.shape}")
    norms = np.sqrt((x2 * x2).sum(axis=1, keepdims=True))
    if np.any(norms == 0.0):
        raise ValueError("l2norm_rows: degenerate embedding (zero-norm row)")
    y = x2 / norms

    def rule(g):
        g2 = g[None, :] if squeeze else g
        gx = (g2 - y * (g2 * y).sum(axis=1, keepdims=True)) / norms
        return (gx[0] if squeeze else gx,)

    return Node(y[0] if squeeze else y, (a,), rule, "l2norm_rows")


def concat_rows(nodes: Sequence[Node]) -> Node:
    """Stack matrices with equal column counts, or join vectors, along axis 0."""
    nodes = [as_node(n) for n in nodes]
    ndims = {n.value.ndim for n in nodes}
    if len(ndims) != 1 or ndims - {1, 2} or len({n.shape[1:] for n in nodes}) != 1:
        raise ValueError(f"concat_rows: incompatible shapes {[n.shape for n in nodes]}")
    bounds = np.cumsum([0] + [n.shape[0] for n in nodes])

    def rule(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(nodes)))

    return Node(np.concatenate([n.value for n in nodes], axis=0), nodes, rule, "concat_rows")


def logsumexp(a: Node, axis: int, mask: np.ndarray | None = None) -> Node:
    """Stable log-sum-exp of a matrix along ``axis``.

    Entries where ``mask`` is True are left out of the sum and get zero gradient.
    """
    x = a.value
    if x.ndim != 2:
        raise ValueError(f"logsumexp: expected a matrix, got shape {a.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ValueError(f"logsumexp: mask shape {mask.shape} != input shape {x.shape}")
        x = np.where(mask, -np.inf, x)
    peak = x.max(axis=axis, keepdims=True)
    if not np.all(np.isfinite(peak)):
        raise ValueError("logsumexp: a slice has no unmasked finite entries")
    e = np.exp(x - peak)
    total = e.sum(axis=axis, keepdims=True)
    out = (np.log(total) + peak).squeeze(axis)
    soft = e / total

    def rule(g):
        return (soft * np.expand_dims(g, axis),)

    return Node(out, (a,), rule, "logsumexp")


def pick(a: Node, rows, cols) -> Node:
    """Gather ``a[rows[i], cols[i]]`` into a vector."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    shape = a.shape

    def rule(g):
        out = np.zeros(shape)
        np.add.at(out, (rows, cols), g)
        return (out,)

    return Node(a.value[rows, cols], (a,), rule, "pick")


def index_scalar(a: Node, i) -> Node:
    """Single element of a node as a 0-d node."""
    shape = a.shape

    def rule(g):
        out = np.zeros(shape)
        out[i] = g
        return (out,)

    value = a.value[i]
    if np.ndim(value) != 0:
        raise ValueError(f"index_scalar: index {i!r} does not select one element of {shape}")
    return Node(value, (a,), rule, "index")


# ----------------------------------------------------------------------------
# backward pass
# ----------------------------------------------------------------------------


def topological_order(root: Node) -> list[Node]:
    """Nodes reachable from ``root``, operands before their consumers."""
    order: list[Node] = []
    seen: set[int] = set()
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
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def zero_grad(root: Node) -> None:
    for node in topological_order(root):
        node.zero_grad()


def backward(root: Node) -> None:
    """Add d(root)/d(node) into ``node.grad`` for every node reachable from root."""
    if root.value.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    order = topological_order(root)
    adjoints: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = adjoints.pop(id(node), None)
        if g is None:
            continue
        node.grad = node.grad + g
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
            key = id(parent)
            adjoints[key] = adjoints[key] + pg if key in adjoints else pg


# ----------------------------------------------------------------------------
# parameters
# ----------------------------------------------------------------------------


class ParamStore:
    """Named float64 parameter arrays, always iterated in sorted-name order.

    ``track()`` wraps the current values in fresh leaf nodes for one forward
    pass; values are only replaced between passes.
    """

    def __init__(self, arrays: dict[str, np.ndarray] | None = None) -> None:
        self._arrays: dict[str, np.ndarray] = {}
        self._leaves: dict[str, Node] = {}
        for name, arr in (arrays or {}).items():
            self[name] = arr

    @property
    def names(self) -> list[str]:
        return sorted(self._arrays)

    @property
    def shapes(self) -> dict[str, tuple]:
        return {n: self._arrays[n].shape for n in self.names}

    @property
    def size(self) -> int:
        return int(np.sum([a.size for a in self._arrays.values()], dtype=np.int64))

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, value) -> None:
        self._arrays[name] = np.array(value, dtype=np.float64)
        self._leaves.pop(name, None)

    def items(self) -> Iterable[tuple[str, np.ndarray]]:
        return ((n, self._arrays[n]) for n in self.names)

    def copy(self) -> "ParamStore":
        return ParamStore({n: a.copy() for n, a in self._arrays.items()})

    def track(self) -> dict[str, Node]:
        self._leaves = {n: Node(self._arrays[n]) for n in self.names}
        return dict(self._leaves)

    def node(self, name: str) -> Node:
        if name not in self._leaves:
            self._leaves[name] = Node(self._arrays[name])
        return self._leaves[name]

    def flatten(self, names: Sequence[str] | None = None) -> np.ndarray:
        names = self.names if names is None else sorted(names)
        if not names:
            return np.zeros(0)
        return np.concatenate([self._arrays[n].ravel() for n in names])

    def unflatten(self, vector: np.ndarray) -> "ParamStore":
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.size,):
            raise ValueError(f"unflatten: expected length {self.size}, got {vector.shape}")
        out, pos = {}, 0
        for name in self.names:
            shape = self._arrays[name].shape
            count = int(np.prod(shape, dtype=np.int64))
            out[name] = vector[pos:pos + count].reshape(shape).copy()
            pos += count
        return ParamStore(out)

    def same_as(self, other: "ParamStore") -> bool:
        """Bit-level equality of names, shapes and values."""
        return self.names == other.names and all(
            self[n].shape == other[n].shape and self[n].tobytes() == other[n].tobytes()
            for n in self.names
        )


def grad_vector(root: Node, params: ParamStore, names: Sequence[str] | None = None) -> np.ndarray:
    """Gradient of a scalar root w.r.t. tracked parameters, flattened in sorted order.

    Clears stale gradients first, so the result holds this root's gradient only.
    Parameters the root does not reach contribute zeros.
    """
    names = params.names if names is None else sorted(names)
    zero_grad(root)
    leaves = [params.node(n) for n in names]
    for leaf in leaves:
        leaf.zero_grad()
    backward(root)
    if not leaves:
        return np.zeros(0)
    return np.concatenate([leaf.grad.ravel() for leaf in leaves])
