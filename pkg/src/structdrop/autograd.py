"""Reverse-mode differentiation over numpy arrays.

A :class:`Node` holds a value and links to the nodes it was computed from,
each paired with a vector-Jacobian product. Calling :func:`backward` on a
scalar node walks the graph once in reverse topological order and
accumulates gradients into every trainable :class:`Parameter`.

Nodes that do not depend on any trainable parameter are recorded as
constant leaves, which is how sampled noise enters the graph: gradients
flow through ``1 + U(sqrt(alpha) * eps)`` with ``eps`` held fixed.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class TapeError(RuntimeError):
    pass


class Node:
    __slots__ = ("value", "grad", "parents", "op", "requires_grad", "_consumed", "__weakref__")
    # numpy operands defer to Node's reflected operators
    __array_ufunc__ = None

    def __init__(self, value, parents=(), op="const"):
        self.value = np.asarray(value, dtype=DTYPE)
        self.parents = parents
        self.op = op
        self.grad = None
        self.requires_grad = bool(parents)
        self._consumed = False

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def item(self) -> float:
        return float(self.value)

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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Node):
    """Trainable leaf. ``grad`` always has the shape of ``value``."""

    __slots__ = ("name", "trainable")

    def __init__(self, value, name: str | None = None, trainable: bool = True):
        super().__init__(np.array(value, dtype=DTYPE), (), "param")
        self.name = name
        self.trainable = trainable
        self.requires_grad = trainable
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Parameter(name={self.name!r}, shape={self.value.shape})"


def lift(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def value_of(x):
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=DTYPE)


def _make(value, parents, op):
    live = tuple((p, fn) for p, fn in parents if p.requires_grad)
    return Node(value, live, op)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------

def add(a, b):
    a, b = lift(a), lift(b)
    return _make(a.value + b.value,
                 ((a, lambda g: _unbroadcast(g, a.shape)),
                  (b, lambda g: _unbroadcast(g, b.shape))), "add")


def sub(a, b):
    a, b = lift(a), lift(b)
    return _make(a.value - b.value,
                 ((a, lambda g: _unbroadcast(g, a.shape)),
                  (b, lambda g: -_unbroadcast(g, b.shape))), "sub")


def mul(a, b):
    a, b = lift(a), lift(b)
    return _make(a.value * b.value,
                 ((a, lambda g: _unbroadcast(g * b.value, a.shape)),
                  (b, lambda g: _unbroadcast(g * a.value, b.shape))), "mul")


def div(a, b):
    a, b = lift(a), lift(b)
    out = a.value / b.value
    return _make(out,
                 ((a, lambda g: _unbroadcast(g / b.value, a.shape)),
                  (b, lambda g: _unbroadcast(-g * out / b.value, b.shape))), "div")


def neg(a):
    a = lift(a)
    return _make(-a.value, ((a, lambda g: -g),), "neg")


def power(a, p: float):
    a = lift(a)
    return _make(a.value ** p, ((a, lambda g: g * p * a.value ** (p - 1)),), "pow")


def square(a):
    a = lift(a)
    return _make(a.value * a.value, ((a, lambda g: 2.0 * g * a.value),), "square")


def exp(a):
    a = lift(a)
    out = np.exp(a.value)
    return _make(out, ((a, lambda g: g * out),), "exp")


def log(a):
    a = lift(a)
    return _make(np.log(a.value), ((a, lambda g: g / a.value),), "log")


def sqrt(a):
    a = lift(a)
    out = np.sqrt(a.value)
    return _make(out, ((a, lambda g: 0.5 * g / out),), "sqrt")


def relu(a):
    a = lift(a)
    mask = a.value > 0
    return _make(a.value * mask, ((a, lambda g: g * mask),), "relu")


def tanh(a):
    a = lift(a)
    out = np.tanh(a.value)
    return _make(out, ((a, lambda g: g * (1.0 - out * out)),), "tanh")


def sigmoid(a):
    a = lift(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _make(out, ((a, lambda g: g * out * (1.0 - out)),), "sigmoid")


def minimum(a, c: float):
    """Hard upper clamp at a constant; zero gradient where clamped."""
    a = lift(a)
    mask = a.value < c
    return _make(np.where(mask, a.value, c), ((a, lambda g: g * mask),), "clamp_max")


# -- linear algebra and shape --------------------------------------------

def matmul(a, b):
    a, b = lift(a), lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _make(a.value @ b.value,
                 ((a, lambda g: g @ b.value.T),
                  (b, lambda g: a.value.T @ g)), "matmul")


def transpose(a):
    a = lift(a)
    return _make(a.value.T, ((a, lambda g: g.T),), "transpose")


def reshape(a, shape):
    a = lift(a)
    old = a.shape
    return _make(a.value.reshape(shape), ((a, lambda g: g.reshape(old)),), "reshape")


def getitem(a, idx):
    a = lift(a)

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return out

    return _make(a.value[idx], ((a, vjp),), "getitem")


def concat(nodes: Sequence, axis=0):
    nodes = [lift(n) for n in nodes]
    sizes = np.cumsum([n.shape[axis] for n in nodes])[:-1]

    def piece(i):
        return lambda g: np.split(g, sizes, axis=axis)[i]

    return _make(np.concatenate([n.value for n in nodes], axis=axis),
                 tuple((n, piece(i)) for i, n in enumerate(nodes)), "concat")


def sum(a, axis=None, keepdims=False):  # noqa: A001
    a = lift(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _make(a.value.sum(axis=axis, keepdims=keepdims), ((a, vjp),), "sum")


def mean(a, axis=None, keepdims=False):
    a = lift(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) / float(n)


# -- likelihoods ---------------------------------------------------------

def log_softmax(logits):
    logits = lift(logits)
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(out)
    return _make(out, ((logits, lambda g: g - p * g.sum(axis=1, keepdims=True)),), "log_softmax")


def softmax_cross_entropy(logits, labels):
    """Summed negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = lift(logits)
    labels = np.asarray(labels, dtype=np.intp)
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(len(labels))
    p = np.exp(logp)

    def vjp(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        return g * d

    return _make(-logp[rows, labels].sum(), ((logits, vjp),), "softmax_xent")


def gaussian_log_density(y, mean_, log_precision):
    """Summed log N(y | mean, 1/precision); precision may broadcast."""
    y, mean_, lp = lift(y), lift(mean_), lift(log_precision)
    r = y.value - mean_.value
    prec = np.exp(lp.value)
    terms = 0.5 * lp.value - 0.5 * np.log(2 * np.pi) - 0.5 * prec * r * r
    full = np.broadcast_shapes(r.shape, np.shape(prec))

    def d_mean(g):
        return _unbroadcast(np.broadcast_to(g * prec * r, full), mean_.shape)

    def d_y(g):
        return _unbroadcast(np.broadcast_to(-g * prec * r, full), y.shape)

    def d_lp(g):
        return _unbroadcast(np.broadcast_to(g * (0.5 - 0.5 * prec * r * r), full), lp.shape)

    return _make(np.sum(np.broadcast_to(terms, full)),
                 ((mean_, d_mean), (y, d_y), (lp, d_lp)), "gauss_logpdf")


# -- convolution and pooling ---------------------------------------------

def _windows(x, kh, kw, stride):
    w = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return w[:, :, ::stride, ::stride]


def conv2d(x, w, stride: int = 1, padding: int = 0):
    """Cross-correlation of ``x`` (n, C, H, W) with ``w`` (O, C, kh, kw)."""
    x, w = lift(x), lift(w)
    n, c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    if c != c2:
        raise ValueError(f"conv2d channel mismatch: input {c}, kernel {c2}")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ValueError("conv2d kernel larger than padded input")
    xp = np.pad(x.value, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _windows(xp, kh, kw, stride)
    ho, wo = cols.shape[2], cols.shape[3]
    out = np.einsum("nchwij,ocij->nohw", cols, w.value, optimize=True)

    def d_w(g):
        return np.einsum("nchwij,nohw->ocij", cols, g, optimize=True)

    def d_x(g):
        dcols = np.einsum("nohw,ocij->nchwij", g, w.value, optimize=True)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[..., i, j]
        return dxp[:, :, padding:padding + h, padding:padding + wd]

    return _make(out, ((x, d_x), (w, d_w)), "conv2d")


def _pool_blocks(v):
    n, c, h, w = v.shape
    h2, w2 = h // 2, w // 2
    v = v[:, :, :2 * h2, :2 * w2]
    return v.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)


def _unpool_blocks(b, shape):
    n, c, h, w = shape
    h2, w2 = b.shape[2], b.shape[3]
    full = np.zeros(shape, dtype=DTYPE)
    full[:, :, :2 * h2, :2 * w2] = (b.reshape(n, c, h2, w2, 2, 2)
                                    .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2))
    return full


def max_pool2d(x):
    x = lift(x)
    blocks = _pool_blocks(x.value)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        b = np.zeros_like(blocks)
        np.put_along_axis(b, arg[..., None], g[..., None], axis=-1)
        return _unpool_blocks(b, x.shape)

    return _make(out, ((x, vjp),), "max_pool2d")


def avg_pool2d(x):
    x = lift(x)
    blocks = _pool_blocks(x.value)

    def vjp(g):
        return _unpool_blocks(np.repeat(g[..., None] / 4.0, 4, axis=-1), x.shape)

    return _make(blocks.mean(axis=-1), ((x, vjp),), "avg_pool2d")


# -- backward pass -------------------------------------------------------

def _topo_order(root: Node) -> list:
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
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(param) into ``param.grad`` for every reachable Parameter."""
    if not isinstance(loss, Node):
        raise TypeError("backward expects a Node")
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise TapeError("tape already consumed; run the forward computation again")
    loss._consumed = True
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad = node.grad + g
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            key = id(parent)
            grads[key] = grads[key] + contrib if key in grads else contrib
        node.parents = ()


def grad(f: Callable[[], Node], params: Iterable[Parameter]) -> list:
    """Fresh gradients of the scalar ``f()`` with respect to ``params``."""
    params = list(params)
    saved = [p.grad for p in params]
    for p in params:
        p.zero_grad()
    backward(f())
    out = [p.grad.copy() for p in params]
    for p, g in zip(params, saved):
        p.grad = g
    return out


def finite_difference_check(f: Callable[[], Node], params: Iterable[Parameter],
                            step: float = 1e-5, abs_switch: float = 1e-8) -> float:
    """Largest discrepancy between tape gradients and central differences.

    Entries whose analytic gradient is below ``abs_switch`` in magnitude are
    compared in absolute terms; all others relative to the analytic value.
    ``f`` must be deterministic, so any noise it draws needs a frozen seed.
    """
    params = list(params)
    analytic = grad(f, params)
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f().item()
            flat[i] = orig - step
            down = f().item()
            flat[i] = orig
            num = (up - down) / (2 * step)
            a = g.reshape(-1)[i]
            err = abs(a - num) if abs(a) < abs_switch else abs(a - num) / abs(a)
            worst = max(worst, err)
    return worst
