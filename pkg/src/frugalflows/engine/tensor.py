"""Array-valued reverse-mode differentiation on an explicit tape.

Every operation in this module records a node holding its output value, its
parent tensors and a closure mapping the output cotangent to parent
cotangents. :func:`backward` walks the recorded graph in reverse topological
order. Recording can be switched off with :func:`no_grad` for pure inference.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np
from scipy import special

from ..errors import DimensionError, NumericError

_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = _recording()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "parents", "vjp", "op")

    def __init__(self, value, requires_grad=False, parents=(), vjp=None, op="const"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.vjp = vjp
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    def numpy(self) -> np.ndarray:
        return self.value

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A leaf tensor that accumulates gradients across :func:`backward` calls."""

    __slots__ = ("name",)

    def __init__(self, value, name=""):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=True, op="param")
        self.grad = np.zeros_like(self.value)
        self.name = name

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, vjp, op):
    """Create an op output; records the vjp only when some parent needs it."""
    if _recording() and any(p.requires_grad for p in parents):
        return Tensor(value, True, parents, vjp, op)
    return Tensor(value, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise binary


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _node(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    out = av / bv

    def vjp(g):
        gb = g / bv
        return _unbroadcast(gb, av.shape), _unbroadcast(-gb * out, bv.shape)

    return _node(out, (a, b), vjp, "div")


def where(cond, a, b):
    """Select ``a`` where ``cond`` holds, else ``b``; ``cond`` is a constant mask."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    return _node(np.where(cond, a.value, b.value), (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa),
                            _unbroadcast(np.where(cond, 0.0, g), sb)), "where")


# ---------------------------------------------------------------------------
# elementwise unary


def neg(a):
    a = as_tensor(a)
    return _node(-a.value, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float):
    a = as_tensor(a)
    av = a.value
    if exponent == 2:
        return _node(av * av, (a,), lambda g: (2.0 * g * av,), "square")
    return _node(av ** exponent, (a,),
                 lambda g: (exponent * g * av ** (exponent - 1),), "pow")


def square(a):
    return power(a, 2)


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.value)
    return _node(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    av = a.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return _node(out, (a,), lambda g: (g / av,), "log")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a):
    a = as_tensor(a)
    out = special.expit(a.value)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a):
    a = as_tensor(a)
    av = a.value
    out = np.logaddexp(0.0, av)
    return _node(out, (a,), lambda g: (g * special.expit(av),), "softplus")


def log_cosh(a):
    """log(cosh(a)), evaluated stably; derivative tanh(a)."""
    a = as_tensor(a)
    av = a.value
    ab = np.abs(av)
    out = ab + np.log1p(np.exp(-2.0 * ab)) - np.log(2.0)
    return _node(out, (a,), lambda g: (g * np.tanh(av),), "log_cosh")


def normal_cdf(a):
    a = as_tensor(a)
    av = a.value
    out = special.ndtr(av)
    return _node(out, (a,),
                 lambda g: (g * np.exp(-0.5 * av * av) / np.sqrt(2.0 * np.pi),), "normal_cdf")


def log_normal_cdf(a):
    a = as_tensor(a)
    av = a.value
    out = special.log_ndtr(av)

    def vjp(g):
        # d/dx log Phi(x) = phi(x) / Phi(x), computed in log space for the left tail
        return (g * np.exp(-0.5 * av * av - 0.5 * np.log(2.0 * np.pi) - out),)

    return _node(out, (a,), vjp, "log_normal_cdf")


# ---------------------------------------------------------------------------
# reductions and shape


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(out, (a,), vjp, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def getitem(a, index):
    a = as_tensor(a)
    shape = a.shape

    basic = all(isinstance(i, (slice, int, type(Ellipsis), type(None)))
                for i in (index if isinstance(index, tuple) else (index,)))

    def vjp(g):
        out = np.zeros(shape)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _node(a.value[index], (a,), vjp, "getitem")


def concat(parts, axis=-1):
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.value for p in parts], axis=axis)
    return _node(out, tuple(parts), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def broadcast_to(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _node(np.broadcast_to(a.value, shape), (a,),
                 lambda g: (_unbroadcast(g, old),), "broadcast")


def cumsum(a, axis=-1):
    a = as_tensor(a)
    return _node(np.cumsum(a.value, axis=axis), (a,),
                 lambda g: (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),), "cumsum")


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _node(out, (a,),
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),), "softmax")


def take_along_axis(a, indices):
    """Gather along the last axis with constant integer ``indices``.

    Leading dimensions of ``a`` and ``indices`` broadcast against each other.
    """
    a = as_tensor(a)
    indices = np.asarray(indices)
    lead = np.broadcast_shapes(a.shape[:-1], indices.shape[:-1])
    src = np.broadcast_to(a.value, lead + a.shape[-1:])
    idx = np.broadcast_to(indices, lead + indices.shape[-1:])
    out = np.take_along_axis(src, idx, axis=-1)
    shape = a.shape

    def vjp(g):
        full = np.zeros(lead + shape[-1:])
        if idx.shape[-1] == 1:
            np.put_along_axis(full, idx, g, axis=-1)
        else:
            for k in range(idx.shape[-1]):
                tmp = np.zeros_like(full)
                np.put_along_axis(tmp, idx[..., k:k + 1], g[..., k:k + 1], axis=-1)
                full += tmp
        return (_unbroadcast(full, shape),)

    return _node(out, (a,), vjp, "take_along_axis")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise DimensionError(f"matmul shapes {av.shape} and {bv.shape} do not align")
    return _node(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


# ---------------------------------------------------------------------------
# graph traversal


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def first_nonfinite(root: Tensor) -> Tensor | None:
    for node in _topological(root):
        if not np.all(np.isfinite(node.value)):
            return node
    return None


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into ``.grad`` of every reachable Parameter."""
    if loss.value.size != 1:
        raise DimensionError("backward needs a scalar loss")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad = node.grad + g
            continue
        if node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def value_and_grad(loss_fn, params):
    """Evaluate ``loss_fn()`` and return ``(loss, [dloss/dp for p in params])``.

    Gradients already sitting on the parameters are discarded first, so the
    result depends only on the inputs.
    """
    for p in params:
        p.zero_grad()
    prev = _recording()
    _state.enabled = True
    try:
        loss = loss_fn()
    finally:
        _state.enabled = prev
    loss = as_tensor(loss)
    if not np.all(np.isfinite(loss.value)):
        bad = first_nonfinite(loss)
        op = bad.op if bad is not None else loss.op
        raise NumericError(f"non-finite loss; first non-finite value produced by op '{op}'", op=op)
    backward(loss)
    return float(loss.value), [p.grad for p in params]


def grad(loss_fn, params):
    return value_and_grad(loss_fn, params)[1]
