"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

The graph is built implicitly: every operation that touches at least one
:class:`Var` records itself and returns a new ``Var``; operations on plain
numpy arrays stay plain numpy. Gradients therefore only flow through values
explicitly marked differentiable with :func:`leaf`, and everything else is
treated as a constant at zero cost.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence, Union

import numpy as np
from scipy.special import erf

ArrayLike = Union["Var", np.ndarray, float, int]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_node_counter = itertools.count()


class GraphError(ValueError):
    """Raised on malformed graph operations; message names the node."""


class Var:
    """A node in the computation graph holding a float64 ndarray value."""

    __slots__ = ("value", "parents", "vjp_fn", "name")

    # keep numpy from consuming Var operands elementwise; arithmetic must
    # fall back to the reflected operators below so it gets recorded
    __array_ufunc__ = None

    def __init__(
        self,
        value: np.ndarray,
        parents: tuple["Var", ...] = (),
        vjp_fn: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None,
        name: str | None = None,
    ):
        self.value = value
        self.parents = parents
        self.vjp_fn = vjp_fn
        self.name = name if name is not None else f"node{next(_node_counter)}"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var({self.name}, shape={self.value.shape})"

    # arithmetic sugar; all routed through the module-level ops
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __neg__(self): return mul(self, -1.0)


def leaf(value: np.ndarray | float, name: str = "leaf") -> Var:
    """Mark an array as a differentiable input of the graph."""
    return Var(np.asarray(value, dtype=np.float64), name=name)


def value_of(x: ArrayLike) -> np.ndarray:
    """The plain float64 array behind ``x`` (Var or array-like)."""
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


def stop_gradient(x: ArrayLike) -> np.ndarray:
    """Detach ``x`` from the graph; downstream ops see a constant."""
    return value_of(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
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


def _record(value, var_parents, vjp_fn, name) -> Var:
    return Var(value, parents=tuple(var_parents), vjp_fn=vjp_fn, name=name)


def add(a: ArrayLike, b: ArrayLike, name: str = "add"):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return out
    parents, slots = [], []
    if isinstance(a, Var):
        parents.append(a); slots.append(av.shape)
    if isinstance(b, Var):
        parents.append(b); slots.append(bv.shape)

    def backward(g):
        return tuple(_unbroadcast(g, s) for s in slots)

    return _record(out, parents, backward, name)


def sub(a: ArrayLike, b: ArrayLike, name: str = "sub"):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return out
    parents, signs, slots = [], [], []
    if isinstance(a, Var):
        parents.append(a); signs.append(1.0); slots.append(av.shape)
    if isinstance(b, Var):
        parents.append(b); signs.append(-1.0); slots.append(bv.shape)

    def backward(g):
        return tuple(_unbroadcast(s * g, sh) for s, sh in zip(signs, slots))

    return _record(out, parents, backward, name)


def mul(a: ArrayLike, b: ArrayLike, name: str = "mul"):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return out
    parents, others, slots = [], [], []
    if isinstance(a, Var):
        parents.append(a); others.append(bv); slots.append(av.shape)
    if isinstance(b, Var):
        parents.append(b); others.append(av); slots.append(bv.shape)

    def backward(g):
        return tuple(_unbroadcast(g * o, sh) for o, sh in zip(others, slots))

    return _record(out, parents, backward, name)


def div(a: ArrayLike, b: ArrayLike, name: str = "div"):
    av, bv = value_of(a), value_of(b)
    out = av / bv
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return out
    parents, backs = [], []
    if isinstance(a, Var):
        parents.append(a)
        backs.append(lambda g: _unbroadcast(g / bv, av.shape))
    if isinstance(b, Var):
        parents.append(b)
        backs.append(lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape))

    def backward(g):
        return tuple(f(g) for f in backs)

    return _record(out, parents, backward, name)


def matmul(a: ArrayLike, b: ArrayLike, name: str = "matmul"):
    av, bv = value_of(a), value_of(b)
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2):
        raise GraphError(f"{name}: matmul supports 1-D/2-D operands, "
                         f"got {av.shape} @ {bv.shape}")
    if av.shape[-1] != bv.shape[0]:
        raise GraphError(f"{name}: inner dimensions disagree, "
                         f"{av.shape} @ {bv.shape}")
    out = av @ bv
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return out

    a2 = av.reshape(1, -1) if av.ndim == 1 else av
    b2 = bv.reshape(-1, 1) if bv.ndim == 1 else bv

    parents, backs = [], []
    if isinstance(a, Var):
        def back_a(g, a_shape=av.shape):
            g2 = g.reshape(a2.shape[0], b2.shape[1])
            return (g2 @ b2.T).reshape(a_shape)
        parents.append(a); backs.append(back_a)
    if isinstance(b, Var):
        def back_b(g, b_shape=bv.shape):
            g2 = g.reshape(a2.shape[0], b2.shape[1])
            return (a2.T @ g2).reshape(b_shape)
        parents.append(b); backs.append(back_b)

    def backward(g):
        return tuple(f(g) for f in backs)

    return _record(out, parents, backward, name)


def gelu(x: ArrayLike, name: str = "gelu"):
    """Gaussian error linear unit in the exact erf form."""
    xv = value_of(x)
    phi = 0.5 * (1.0 + erf(xv * _INV_SQRT2))
    out = xv * phi
    if not isinstance(x, Var):
        return out

    def backward(g):
        pdf = np.exp(-0.5 * xv * xv) * _INV_SQRT_2PI
        return (g * (phi + xv * pdf),)

    return _record(out, (x,), backward, name)


def relu(x: ArrayLike, name: str = "relu"):
    xv = value_of(x)
    out = np.maximum(xv, 0.0)
    if not isinstance(x, Var):
        return out

    def backward(g):
        return (g * (xv > 0.0),)

    return _record(out, (x,), backward, name)


def exp(x: ArrayLike, name: str = "exp"):
    xv = value_of(x)
    out = np.exp(xv)
    if not isinstance(x, Var):
        return out

    def backward(g):
        return (g * out,)

    return _record(out, (x,), backward, name)


def log(x: ArrayLike, name: str = "log"):
    xv = value_of(x)
    out = np.log(xv)
    if not isinstance(x, Var):
        return out

    def backward(g):
        return (g / xv,)

    return _record(out, (x,), backward, name)


def maximum_floor(x: ArrayLike, floor: float, name: str = "maximum_floor"):
    """Elementwise ``max(x, floor)``; gradient passes where x >= floor."""
    xv = value_of(x)
    out = np.maximum(xv, floor)
    if not isinstance(x, Var):
        return out

    def backward(g):
        return (g * (xv >= floor),)

    return _record(out, (x,), backward, name)


def reduce_sum(x: ArrayLike, axis=None, keepdims: bool = False, name: str = "sum"):
    xv = value_of(x)
    out = xv.sum(axis=axis, keepdims=keepdims)
    if not isinstance(x, Var):
        return out

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            g = np.expand_dims(g, tuple(a % xv.ndim for a in axes))
        return (np.broadcast_to(g, xv.shape),)

    return _record(out, (x,), backward, name)


def reduce_mean(x: ArrayLike, axis=None, keepdims: bool = False, name: str = "mean"):
    xv = value_of(x)
    count = xv.size if axis is None else np.prod(
        [xv.shape[a] for a in ((axis,) if isinstance(axis, int) else axis)])
    s = reduce_sum(x, axis=axis, keepdims=keepdims, name=name)
    return mul(s, 1.0 / float(count), name=name)


def concat(parts: Sequence[ArrayLike], axis: int = -1, name: str = "concat"):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    if not any(isinstance(p, Var) for p in parts):
        return out
    ax = axis % out.ndim
    offsets = np.cumsum([0] + [v.shape[ax] for v in vals])

    parents, spans = [], []
    for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
        if isinstance(p, Var):
            parents.append(p)
            spans.append((int(lo), int(hi)))

    def backward(g):
        sl = [slice(None)] * g.ndim
        pieces = []
        for lo, hi in spans:
            sl[ax] = slice(lo, hi)
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return _record(out, parents, backward, name)


def slice_cols(x: ArrayLike, start: int, stop: int, name: str = "slice_cols"):
    """Columns ``start:stop`` along the last axis."""
    xv = value_of(x)
    out = xv[..., start:stop]
    if not isinstance(x, Var):
        return out

    def backward(g):
        full = np.zeros_like(xv)
        full[..., start:stop] = g
        return (full,)

    return _record(out, (x,), backward, name)


def layer_norm(x: ArrayLike, gain: ArrayLike, bias: ArrayLike,
               eps: float = 1e-5, name: str = "layer_norm"):
    """Normalize over the last axis, then apply elementwise gain and bias."""
    xv, gv, bv = value_of(x), value_of(gain), value_of(bias)
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gv + bv
    if not (isinstance(x, Var) or isinstance(gain, Var) or isinstance(bias, Var)):
        return out

    parents, backs = [], []
    if isinstance(x, Var):
        def back_x(g):
            gh = g * gv
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            return inv * (gh - m1 - xhat * m2)
        parents.append(x); backs.append(back_x)
    if isinstance(gain, Var):
        parents.append(gain)
        backs.append(lambda g: _unbroadcast(g * xhat, gv.shape))
    if isinstance(bias, Var):
        parents.append(bias)
        backs.append(lambda g: _unbroadcast(g, bv.shape))

    def backward(g):
        return tuple(f(g) for f in backs)

    return _record(out, parents, backward, name)


def vjp(output: Var, cotangent: np.ndarray | float | None = None) -> dict[Var, np.ndarray]:
    """Gradients of ``<output, cotangent>`` for every Var in the graph.

    ``cotangent`` defaults to 1 when the output is a scalar. The returned
    dict maps each reachable Var (leaves included) to its gradient.
    """
    if not isinstance(output, Var):
        raise GraphError("vjp: output is not a Var; nothing was recorded")
    if cotangent is None:
        if output.value.size != 1:
            raise GraphError(
                f"vjp: node '{output.name}' is not scalar; pass a cotangent")
        cotangent = np.ones_like(output.value)
    cot = np.asarray(cotangent, dtype=np.float64)
    if cot.shape != output.value.shape:
        raise GraphError(
            f"vjp: cotangent shape {cot.shape} does not match node "
            f"'{output.name}' of shape {output.value.shape}")

    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(output, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[Var, np.ndarray] = {output: cot}
    for node in reversed(order):
        g = grads.get(node)
        if g is None or node.vjp_fn is None:
            continue
        parent_grads = node.vjp_fn(g)
        if len(parent_grads) != len(node.parents):
            raise GraphError(f"vjp: node '{node.name}' produced "
                             f"{len(parent_grads)} cotangents for "
                             f"{len(node.parents)} parents")
        for p, pg in zip(node.parents, parent_grads):
            if pg.shape != p.value.shape:
                raise GraphError(
                    f"vjp: node '{node.name}' sent gradient of shape "
                    f"{pg.shape} to parent '{p.name}' of shape {p.value.shape}")
            if p in grads:
                grads[p] = grads[p] + pg
            else:
                grads[p] = pg
    return grads


def grad_of(grads: dict[Var, np.ndarray], var: Var) -> np.ndarray:
    """Gradient for ``var``, zero-filled when the graph never reached it."""
    g = grads.get(var)
    if g is None:
        return np.zeros_like(var.value)
    return g
