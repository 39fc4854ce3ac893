"""Reverse-mode differentiation over a fixed set of array operations.

The vocabulary is exactly what small ReLU classifiers and margin-based
attack losses need: affine maps, ReLU, tempered softmax, log-sum-exp,
elementwise arithmetic, indexing, reductions, and a gradient barrier.
Values are float64 numpy arrays throughout. Vector operations act rowwise
on 2-D inputs so the same graph code serves single examples and
mini-batches.

Nodes are immutable once created; a backward pass accumulates adjoints in
per-call scratch space, so the same expression can be evaluated and
differentiated concurrently from multiple threads.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractViolation, DivergenceError

Array = np.ndarray


def _as_array(x) -> Array:
    return np.asarray(x, dtype=np.float64)


class Node:
    """One vertex of a differentiable computation.

    ``parents`` lists the inputs the node depends on and ``_vjp`` maps an
    adjoint for this node to adjoints for those parents (``None`` entries
    for parents that do not require gradients).
    """

    __slots__ = ("value", "parents", "_vjp", "requires_grad")

    def __init__(self, value, parents=(), vjp=None, requires_grad=False):
        self.value = _as_array(value)
        self.parents = tuple(parents)
        self._vjp = vjp
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __repr__(self):
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"


def leaf(x) -> Node:
    """Differentiable input: gradients may be requested with respect to it."""
    return Node(x, (), None, requires_grad=True)


def constant(x) -> Node:
    """Non-differentiable input; contributes zero to every gradient."""
    return Node(x, (), None, requires_grad=False)


def _wrap(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _unbroadcast(g: Array, shape) -> Array:
    """Sum an adjoint down to the shape of the operand it belongs to."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (have, want) in enumerate(zip(g.shape, shape)):
        if want == 1 and have != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    value = a.value + b.value
    req = a.requires_grad or b.requires_grad
    if not req:
        return Node(value)

    def vjp(g):
        return (
            _unbroadcast(g, a.value.shape) if a.requires_grad else None,
            _unbroadcast(g, b.value.shape) if b.requires_grad else None,
        )

    return Node(value, (a, b), vjp, True)


def sub(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    value = a.value - b.value
    req = a.requires_grad or b.requires_grad
    if not req:
        return Node(value)

    def vjp(g):
        return (
            _unbroadcast(g, a.value.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.value.shape) if b.requires_grad else None,
        )

    return Node(value, (a, b), vjp, True)


def neg(a) -> Node:
    a = _wrap(a)
    if not a.requires_grad:
        return Node(-a.value)
    return Node(-a.value, (a,), lambda g: (-g,), True)


def mul(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    value = a.value * b.value
    req = a.requires_grad or b.requires_grad
    if not req:
        return Node(value)

    def vjp(g):
        return (
            _unbroadcast(g * b.value, a.value.shape) if a.requires_grad else None,
            _unbroadcast(g * a.value, b.value.shape) if b.requires_grad else None,
        )

    return Node(value, (a, b), vjp, True)


def scale(c: float, a) -> Node:
    """Multiply by a python scalar treated as a constant."""
    a = _wrap(a)
    c = float(c)
    if not a.requires_grad:
        return Node(c * a.value)
    return Node(c * a.value, (a,), lambda g: (c * g,), True)


def div_const(a, c: float) -> Node:
    """Elementwise division by a nonzero constant (single rounding per entry)."""
    a = _wrap(a)
    c = float(c)
    if c == 0.0:
        raise ConfigError("div_const requires a nonzero divisor")
    if not a.requires_grad:
        return Node(a.value / c)
    return Node(a.value / c, (a,), lambda g: (g / c,), True)


def matmul(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ContractViolation("matmul expects 2-D operands")
    value = a.value @ b.value
    req = a.requires_grad or b.requires_grad
    if not req:
        return Node(value)

    def vjp(g):
        return (
            g @ b.value.T if a.requires_grad else None,
            a.value.T @ g if b.requires_grad else None,
        )

    return Node(value, (a, b), vjp, True)


def affine(x, weight, bias=None) -> Node:
    """``x @ weight.T + bias`` for ``x`` of shape (in,) or (batch, in).

    ``weight`` has shape (out, in) and ``bias`` shape (out,); either may be
    a plain array (constant) or a Node (trainable).
    """
    x, w = _wrap(x), _wrap(weight)
    b = None if bias is None else _wrap(bias)
    single = x.value.ndim == 1
    if w.value.ndim != 2 or x.value.ndim not in (1, 2):
        raise ContractViolation("affine expects a 2-D weight and 1-D or 2-D input")
    if x.value.shape[-1] != w.value.shape[1]:
        raise ContractViolation(
            f"affine shape mismatch: input {x.value.shape} vs weight {w.value.shape}"
        )
    value = x.value @ w.value.T
    if b is not None:
        value = value + b.value
    parents = (x, w) if b is None else (x, w, b)
    req = any(p.requires_grad for p in parents)
    if not req:
        return Node(value)

    def vjp(g):
        if single:
            gx = w.value.T @ g if x.requires_grad else None
            gw = np.outer(g, x.value) if w.requires_grad else None
            gb = g if (b is not None and b.requires_grad) else None
        else:
            gx = g @ w.value if x.requires_grad else None
            gw = g.T @ x.value if w.requires_grad else None
            gb = g.sum(axis=0) if (b is not None and b.requires_grad) else None
        return (gx, gw) if b is None else (gx, gw, gb)

    return Node(value, parents, vjp, True)


def relu(a) -> Node:
    a = _wrap(a)
    mask = a.value > 0
    value = np.where(mask, a.value, 0.0)
    if not a.requires_grad:
        return Node(value)
    return Node(value, (a,), lambda g: (g * mask,), True)


def softmax_values(z: Array, tau: float = 1.0) -> Array:
    """Numerically stable tempered softmax on plain arrays, rowwise on 2-D."""
    if tau <= 0:
        raise ConfigError(f"softmax temperature must be positive, got {tau}")
    a = _as_array(z) / tau
    a = a - a.max(axis=-1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_t(x, tau: float = 1.0) -> Node:
    x = _wrap(x)
    s = softmax_values(x.value, tau)
    if not x.requires_grad:
        return Node(s)

    def vjp(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        return ((s * (g - inner)) / tau,)

    return Node(s, (x,), vjp, True)


def logsumexp(x) -> Node:
    """Rowwise log-sum-exp: (n,) -> scalar, (batch, n) -> (batch,)."""
    x = _wrap(x)
    m = x.value.max(axis=-1, keepdims=True)
    value = (m + np.log(np.exp(x.value - m).sum(axis=-1, keepdims=True))).squeeze(-1)
    if not x.requires_grad:
        return Node(value)
    s = softmax_values(x.value, 1.0)

    def vjp(g):
        return (np.expand_dims(g, -1) * s if x.value.ndim == 2 else g * s,)

    return Node(value, (x,), vjp, True)


def gather(x, index) -> Node:
    """Select one entry per row: (n,) with int -> scalar, (b, n) with (b,) -> (b,)."""
    x = _wrap(x)
    if x.value.ndim == 1:
        i = int(index)
        value = _as_array(x.value[i])
        if not x.requires_grad:
            return Node(value)

        def vjp(g):
            out = np.zeros_like(x.value)
            out[i] = g
            return (out,)

        return Node(value, (x,), vjp, True)
    idx = np.asarray(index, dtype=np.intp)
    rows = np.arange(x.value.shape[0])
    value = x.value[rows, idx]
    if not x.requires_grad:
        return Node(value)

    def vjp(g):
        out = np.zeros_like(x.value)
        out[rows, idx] = g
        return (out,)

    return Node(value, (x,), vjp, True)


def vsum(x, axis=None) -> Node:
    x = _wrap(x)
    value = x.value.sum(axis=axis)
    if not x.requires_grad:
        return Node(value)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.value.shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.value.shape),)

    return Node(value, (x,), vjp, True)


def vmean(x) -> Node:
    x = _wrap(x)
    return div_const(vsum(x), x.value.size)


def log(x) -> Node:
    x = _wrap(x)
    value = np.log(x.value)
    if not x.requires_grad:
        return Node(value)
    return Node(value, (x,), lambda g: (g / x.value,), True)


def exp(x) -> Node:
    x = _wrap(x)
    value = np.exp(x.value)
    if not x.requires_grad:
        return Node(value)
    return Node(value, (x,), lambda g: (g * value,), True)


def pow_const(x, p: float) -> Node:
    x = _wrap(x)
    p = float(p)
    value = x.value ** p
    if not x.requires_grad:
        return Node(value)
    return Node(value, (x,), lambda g: (g * p * x.value ** (p - 1.0),), True)


def sqrt(x) -> Node:
    return pow_const(x, 0.5)


def clamp_min(x, floor: float) -> Node:
    """Elementwise max(x, floor); entries at the floor get zero gradient."""
    x = _wrap(x)
    mask = x.value > floor
    value = np.maximum(x.value, floor)
    if not x.requires_grad:
        return Node(value)
    return Node(value, (x,), lambda g: (g * mask,), True)


def detach(x) -> Node:
    """Gradient barrier: same forward value, no gradient flows through."""
    x = _wrap(x)
    return Node(x.value)


def _topo_order(root: Node) -> list[Node]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(f: Node, wrt) -> Array | list[Array]:
    """Gradient of a scalar node with respect to one or more leaves.

    Leaves not reached by the backward sweep get zero gradients. A
    non-scalar ``f`` is a contract violation; a non-finite forward value
    signals divergence.
    """
    if not isinstance(f, Node):
        raise ContractViolation("grad expects a Node output")
    if f.value.shape != ():
        raise ContractViolation(f"grad requires a scalar output, got shape {f.value.shape}")
    if not np.isfinite(f.value):
        raise DivergenceError("forward value is not finite")
    single = isinstance(wrt, Node)
    targets: Sequence[Node] = [wrt] if single else list(wrt)
    adjoint: dict[int, Array] = {}
    if f.requires_grad:
        adjoint[id(f)] = np.ones(())
        for node in reversed(_topo_order(f)):
            g = adjoint.get(id(node))
            if g is None or node._vjp is None:
                continue
            for parent, pg in zip(node.parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                acc = adjoint.get(key)
                adjoint[key] = pg if acc is None else acc + pg
    out = [
        adjoint.get(id(t), np.zeros_like(t.value)).reshape(t.value.shape).astype(np.float64)
        for t in targets
    ]
    return out[0] if single else out


def finite_diff(f: Callable[[Array], float], x: Array, h: float = 1e-5) -> Array:
    """Central-difference gradient of a scalar function of an array."""
    x = _as_array(x)
    if h <= 0:
        raise ConfigError(f"finite_diff step must be positive, got {h}")
    out = np.zeros_like(x)
    flat = out.reshape(-1)
    for i in range(x.size):
        bump = np.zeros_like(x).reshape(-1)
        bump[i] = h
        bump = bump.reshape(x.shape)
        flat[i] = (float(f(x + bump)) - float(f(x - bump))) / (2.0 * h)
    return out
