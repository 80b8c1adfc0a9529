"""A minimal graph-based reverse-mode differentiation engine.

Only a fixed set of primitives is supported: affine maps, SiLU, layer
normalization, addition, concatenation along the last axis and a scaled
mean-square reduction. Anything else raises :class:`UnsupportedPrimitive`,
either when it is attempted on a :class:`Var` or when :func:`backward` finds a
node it cannot differentiate.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

PRIMITIVES = frozenset({"leaf", "affine", "silu", "layer_norm", "add", "concat", "mean_square"})


class UnsupportedPrimitive(TypeError):
    pass


class Var:
    """A node of the computation graph.

    ``parents`` is a tuple of ``(parent, vjp)`` pairs where ``vjp`` maps the
    cotangent of this node to the cotangent contribution of ``parent``.
    """

    __slots__ = ("value", "op", "parents", "requires_grad", "grad")

    def __init__(self, value, op="leaf", parents=(), requires_grad=False):
        self.value = value
        self.op = op
        self.parents = tuple(parents)
        self.requires_grad = requires_grad or any(p.requires_grad for p, _ in self.parents)
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def _unsupported(self, *args, **kwargs):
        raise UnsupportedPrimitive("operation is outside the supported primitive set")

    __sub__ = __rsub__ = __mul__ = __rmul__ = __truediv__ = __rtruediv__ = _unsupported
    __pow__ = __matmul__ = __rmatmul__ = __neg__ = __getitem__ = _unsupported

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        raise UnsupportedPrimitive(f"numpy ufunc {ufunc.__name__!r} is not a supported primitive")

    def __array_function__(self, func, types, args, kwargs):
        raise UnsupportedPrimitive(f"numpy function {func.__name__!r} is not a supported primitive")

    def __repr__(self):
        return f"Var(op={self.op!r}, shape={self.value.shape})"


def leaf(value, requires_grad=False) -> Var:
    return Var(np.asarray(value), requires_grad=requires_grad)


def _as_var(x) -> Var:
    return x if isinstance(x, Var) else leaf(x)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(value, op, parents):
    parents = [(p, f) for p, f in parents if p.requires_grad]
    return Var(value, op, parents)


def affine(x, w, b) -> Var:
    """``x @ w + b`` with ``x`` of shape ``(..., n)``, ``w`` of ``(n, m)``."""
    x, w, b = _as_var(x), _as_var(w), _as_var(b)
    xv, wv = x.value, w.value
    out = xv @ wv + b.value

    def vjp_x(g):
        return g @ wv.T

    def vjp_w(g):
        return xv.reshape(-1, xv.shape[-1]).T @ g.reshape(-1, g.shape[-1])

    def vjp_b(g):
        return g.reshape(-1, g.shape[-1]).sum(axis=0)

    return _make(out, "affine", [(x, vjp_x), (w, vjp_w), (b, vjp_b)])


def silu(x) -> Var:
    x = _as_var(x)
    s = expit(x.value)
    out = x.value * s

    def vjp(g):
        return g * (s * (1.0 + x.value * (1.0 - s)))

    return _make(out, "silu", [(x, vjp)])


def layer_norm(x, gain, bias, eps=1e-5) -> Var:
    """Normalize over the last axis, then scale and shift elementwise."""
    x, gain, bias = _as_var(x), _as_var(gain), _as_var(bias)
    xv = x.value
    centered = xv - xv.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gain.value + bias.value

    def vjp_x(g):
        gh = g * gain.value
        n = xv.shape[-1]
        return inv_std * (gh - gh.sum(axis=-1, keepdims=True) / n
                          - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / n)

    def vjp_gain(g):
        return (g * xhat).reshape(-1, xv.shape[-1]).sum(axis=0)

    def vjp_bias(g):
        return g.reshape(-1, xv.shape[-1]).sum(axis=0)

    return _make(out, "layer_norm", [(x, vjp_x), (gain, vjp_gain), (bias, vjp_bias)])


def add(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    out = a.value + b.value
    sa, sb = a.value.shape, b.value.shape
    return _make(out, "add", [(a, lambda g: _unbroadcast(g, sa)),
                              (b, lambda g: _unbroadcast(g, sb))])


def concat(*xs) -> Var:
    """Concatenate along the last axis."""
    xs = [_as_var(x) for x in xs]
    out = np.concatenate([x.value for x in xs], axis=-1)
    bounds = np.cumsum([0] + [x.value.shape[-1] for x in xs])
    parents = []
    for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
        parents.append((x, lambda g, lo=lo, hi=hi: g[..., lo:hi]))
    return _make(out, "concat", parents)


def mean_square(x, scale=1.0) -> Var:
    """Scalar ``scale * mean(x**2)``."""
    x = _as_var(x)
    n = x.value.size
    out = np.asarray(scale * np.mean(x.value * x.value))

    def vjp(g):
        return (2.0 * scale / n) * g * x.value

    return _make(out, "mean_square", [(x, vjp)])


def _toposort(root: Var):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order[::-1]


def backward(root: Var, cotangent=None) -> None:
    """Accumulate ``d root / d leaf`` (or a vector-Jacobian product) into ``.grad``.

    For a scalar ``root`` the cotangent defaults to one. Gradients are
    written on every leaf that has ``requires_grad`` set.
    """
    if cotangent is None:
        if root.value.size != 1:
            raise ValueError("a cotangent is required for non-scalar outputs")
        cotangent = np.ones_like(root.value)
    order = _toposort(root)
    for node in order:
        if node.op not in PRIMITIVES:
            raise UnsupportedPrimitive(f"cannot differentiate through {node.op!r}")
    grads = {id(root): np.asarray(cotangent, dtype=root.value.dtype)}
    for node in order:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.op == "leaf":
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            key = id(parent)
            grads[key] = contrib if key not in grads else grads[key] + contrib
