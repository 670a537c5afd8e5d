"""Reverse-mode automatic differentiation over small dense float64 matrices.

Every value is a 2-D ``numpy`` array. A :class:`Node` records the op that
produced it and its parents; :func:`backward` walks the graph once in reverse
topological order and accumulates vector-Jacobian products.

The inner optimizer of the bilevel loop writes its own gradient in closed form
with these ops, so unrolled updates stay differentiable without any
higher-order machinery here.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Node",
    "param",
    "const",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "add_scalar",
    "neg",
    "transpose",
    "relu",
    "tanh",
    "square",
    "sqrt",
    "total",
    "mean",
    "sq_frobenius",
    "custom",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        joined = " and ".join(str(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


_VJP = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Node:
    """A value in the computation graph.

    Leaves are created with :func:`param` (differentiable) or :func:`const`.
    ``grad`` is filled in by :func:`backward` for every node it reaches.
    """

    __slots__ = ("value", "op", "parents", "grad", "requires_grad", "_vjp")

    def __init__(
        self,
        value: np.ndarray,
        op: str = "leaf",
        parents: tuple[Node, ...] = (),
        vjp: _VJP | None = None,
        requires_grad: bool | None = None,
    ):
        self.value = value
        self.op = op
        self.parents = parents
        self._vjp = vjp
        self.grad: np.ndarray | None = None
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape})"

    def __matmul__(self, other: Node) -> Node:
        return matmul(self, other)

    def __add__(self, other: Node | float) -> Node:
        if isinstance(other, Node):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other: Node | float) -> Node:
        if isinstance(other, Node):
            return sub(self, other)
        return add_scalar(self, -other)

    def __mul__(self, other: Node | float) -> Node:
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: Node) -> Node:
        return div(self, other)

    def __neg__(self) -> Node:
        return neg(self)


def _as_matrix(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise ShapeError("leaf", arr.shape)
    return arr


def param(value) -> Node:
    """Differentiable leaf. 0-d and 1-d input become (1,1) and column vectors."""
    return Node(_as_matrix(value), requires_grad=True)


def const(value) -> Node:
    return Node(_as_matrix(value), requires_grad=False)


def _same_shape(op: str, a: Node, b: Node) -> None:
    if a.value.shape != b.value.shape:
        raise ShapeError(op, a.value.shape, b.value.shape)


def matmul(a: Node, b: Node) -> Node:
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError("matmul", a.value.shape, b.value.shape)
    av, bv = a.value, b.value

    def vjp(g):
        return g @ bv.T, av.T @ g

    return Node(av @ bv, "matmul", (a, b), vjp)


def add(a: Node, b: Node) -> Node:
    _same_shape("add", a, b)
    return Node(a.value + b.value, "add", (a, b), lambda g: (g, g))


def sub(a: Node, b: Node) -> Node:
    _same_shape("sub", a, b)
    return Node(a.value - b.value, "sub", (a, b), lambda g: (g, -g))


def mul(a: Node, b: Node) -> Node:
    """Elementwise product."""
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return Node(av * bv, "mul", (a, b), lambda g: (g * bv, g * av))


def div(a: Node, b: Node) -> Node:
    """Elementwise quotient."""
    _same_shape("div", a, b)
    av, bv = a.value, b.value
    out = av / bv
    return Node(out, "div", (a, b), lambda g: (g / bv, -g * out / bv))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return Node(a.value * c, "scale", (a,), lambda g: (g * c,))


def add_scalar(a: Node, c: float) -> Node:
    return Node(a.value + float(c), "add_scalar", (a,), lambda g: (g,))


def neg(a: Node) -> Node:
    return Node(-a.value, "neg", (a,), lambda g: (-g,))


def transpose(a: Node) -> Node:
    return Node(a.value.T.copy(), "transpose", (a,), lambda g: (g.T,))


def relu(a: Node) -> Node:
    # derivative at exactly 0 is 0
    mask = a.value > 0.0
    return Node(np.where(mask, a.value, 0.0), "relu", (a,), lambda g: (g * mask,))


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return Node(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def square(a: Node) -> Node:
    av = a.value
    return Node(av * av, "square", (a,), lambda g: (2.0 * g * av,))


def sqrt(a: Node) -> Node:
    """Elementwise square root; the derivative at 0 is taken as 0.

    Inside Adam the argument is a second-moment buffer, which is 0 only where
    every gradient so far was exactly 0, so the upstream factor is 0 there too.
    """
    if np.any(a.value < 0.0):
        raise ValueError("sqrt: negative argument")
    out = np.sqrt(a.value)
    pos = out > 0.0
    safe = np.where(pos, out, 1.0)

    def vjp(g):
        return (np.where(pos, g / (2.0 * safe), 0.0),)

    return Node(out, "sqrt", (a,), vjp)


def total(a: Node) -> Node:
    """Sum of all entries, as a (1,1) node."""
    shape = a.value.shape
    return Node(
        np.array([[a.value.sum()]]), "sum", (a,), lambda g: (np.full(shape, g[0, 0]),)
    )


def mean(a: Node) -> Node:
    shape = a.value.shape
    size = a.value.size
    if size == 0:
        raise ShapeError("mean", shape)
    return Node(
        np.array([[a.value.sum() / size]]),
        "mean",
        (a,),
        lambda g: (np.full(shape, g[0, 0] / size),),
    )


def sq_frobenius(a: Node) -> Node:
    av = a.value
    return Node(
        np.array([[np.sum(av * av)]]), "sq_frobenius", (a,), lambda g: (2.0 * g[0, 0] * av,)
    )


def custom(
    op: str,
    value: np.ndarray,
    parents: Sequence[Node],
    vjp: _VJP,
) -> Node:
    """Wrap an externally computed value with a user supplied vector-Jacobian product."""
    return Node(_as_matrix(value), op, tuple(parents), vjp)


def _topological(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(root: Node, wrt: Iterable[Node] | None = None) -> dict[Node, np.ndarray]:
    """Accumulate d(root)/d(node) into ``node.grad`` for every reachable node.

    Returns a map from leaf parameters to gradients. Leaves listed in ``wrt``
    that the root does not depend on get a zero gradient.
    """
    if root.value.shape != (1, 1):
        raise ShapeError("backward (root must be scalar)", root.value.shape)
    order = _topological(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones((1, 1))}
    leaves: dict[Node, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            g = np.zeros_like(node.value)
        node.grad = g
        if not node.parents:
            if node.requires_grad:
                leaves[node] = g
            continue
        for parent, pg in zip(node.parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    if wrt is not None:
        out = {}
        for leaf in wrt:
            if leaf in leaves:
                out[leaf] = leaves[leaf]
            else:
                leaf.grad = np.zeros_like(leaf.value)
                out[leaf] = leaf.grad
        return out
    return leaves


def grad_check(
    scalar_fn: Callable[[Node], Node],
    point,
    step: float = 1e-4,
) -> float:
    """Max relative error between backprop and central differences.

    ``scalar_fn`` maps a parameter node to a scalar node. Differences use the
    five-point central stencil with step ``step * max(1, |x_i|)``; its
    truncation error is fourth order, so a larger step keeps float64 rounding
    well below the tolerances used in tests. Per coordinate the error is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)``.
    """
    x0 = _as_matrix(point)
    leaf = param(x0.copy())
    out = scalar_fn(leaf)
    if not np.isfinite(out.value).all():
        raise FloatingPointError("grad_check: non-finite function value")
    analytic = backward(out, [leaf])[leaf]

    def f(x):
        v = scalar_fn(const(x)).value
        if not np.isfinite(v).all():
            raise FloatingPointError("grad_check: non-finite function value")
        return float(v[0, 0])

    def shifted(i, d):
        x = flat.copy()
        x[i] += d
        return f(x.reshape(x0.shape))

    worst = 0.0
    flat = x0.reshape(-1)
    for i in range(flat.size):
        h = step * max(1.0, abs(flat[i]))
        numeric = (8.0 * (shifted(i, h) - shifted(i, -h))
                   - (shifted(i, 2.0 * h) - shifted(i, -2.0 * h))) / (12.0 * h)
        a = float(analytic.reshape(-1)[i])
        denom = max(abs(a), abs(numeric), 1e-12)
        worst = max(worst, abs(a - numeric) / denom)
    return worst
