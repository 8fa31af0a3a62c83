"""Dense float64 tensors with a dynamic reverse-mode tape.

Every differentiable operation builds its output through :func:`_result`,
which records the parents and a closure mapping the upstream gradient to one
gradient per parent.  :meth:`Tensor.backward` replays those closures in exact
reverse creation order.
"""
from __future__ import annotations

import contextlib
import itertools
import threading

import numpy as np

_seq = itertools.count()
_local = threading.local()

# Counters for recoverable numerical events (e.g. a collapsed embedding).
diagnostics = {"zero_norm_clamped": 0}


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class BackwardError(RuntimeError):
    """The tape cannot be replayed as requested."""


def _grad_enabled():
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


@contextlib.contextmanager
def trace_kinks():
    """Collect the inputs of every piecewise-linear op evaluated in the block.

    Used by the gradient checker to skip coordinates near ReLU-type kinks.
    """
    prev = getattr(_local, "kinks", None)
    record = []
    _local.kinks = record
    try:
        yield record
    finally:
        _local.kinks = prev


def _note_kink(z):
    record = getattr(_local, "kinks", None)
    if record is not None:
        record.append(np.array(z, copy=True))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_seq", "_consumed")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._seq = next(_seq)
        self._consumed = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    def zero_grad(self):
        self.grad = None

    # -- operator sugar --------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    # -- reverse pass ----------------------------------------------------
    def backward(self):
        if self.data.size != 1:
            raise BackwardError(f"backward() needs a scalar, got shape {self.shape}")
        if self._consumed:
            raise BackwardError("backward() already ran on this tensor; rebuild the graph first")
        self._consumed = True
        nodes = _reachable(self)
        nodes.sort(key=lambda t: t._seq, reverse=True)
        grads = {id(self): np.ones_like(self.data)}
        for node in nodes:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _reachable(root):
    seen = set()
    out = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen or not t.requires_grad:
            continue
        seen.add(id(t))
        out.append(t)
        stack.extend(t._parents)
    return out


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(data, op):
    if not np.isfinite(np.sum(data)):
        if not np.isfinite(data).all():
            raise FloatingPointError(f"{op}: produced NaN or Inf")
    return data


def _result(data, parents, backward, op):
    data = _check_finite(np.asarray(data, dtype=np.float64), op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._seq = next(_seq)
    out._consumed = False
    track = _grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise arithmetic ------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = ad / bd

    def back(g):
        ga = g / bd
        gb = -g * out / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(out, (a, b), back, "div")


def neg(a):
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p):
    a = as_tensor(a)
    ad = a.data
    with np.errstate(all="ignore"):
        out = ad ** p
    return _result(out, (a,), lambda g: (g * p * ad ** (p - 1),), "power")


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _result(out, (a,), lambda g: (g / ad,), "log")


def sqrt(a):
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    with np.errstate(divide="ignore"):
        return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a):
    a = as_tensor(a)
    _note_kink(a.data)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a, slope=0.2):
    a = as_tensor(a)
    _note_kink(a.data)
    scale = np.where(a.data > 0, 1.0, slope)
    return _result(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def elu(a, alpha=1.0):
    a = as_tensor(a)
    neg_part = alpha * np.expm1(np.minimum(a.data, 0.0))
    out = np.where(a.data > 0, a.data, neg_part)
    slope = np.where(a.data > 0, 1.0, neg_part + alpha)
    return _result(out, (a,), lambda g: (g * slope,), "elu")


def sigmoid(a):
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def clamp_min(a, lo):
    a = as_tensor(a)
    _note_kink(a.data - lo)
    mask = a.data > lo
    return _result(np.where(mask, a.data, lo), (a,), lambda g: (g * mask,), "clamp_min")


# -- reductions and shape ------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), back, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat")


def take(a, index):
    """Gather rows ``a[index]`` along axis 0."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    n = a.shape[0]

    def back(g):
        return (_scatter_rows(g, index, n),)

    return _result(a.data[index], (a,), back, "take")


def _segment_matrix(segments, num_segments):
    import scipy.sparse as sp
    m = len(segments)
    return sp.csr_matrix((np.ones(m), (segments, np.arange(m))), shape=(num_segments, m))


def _scatter_rows(g, index, n):
    flat = g.reshape(g.shape[0], -1)
    out = _segment_matrix(index, n) @ flat
    return np.asarray(out).reshape((n,) + g.shape[1:])


def segment_sum(a, segments, num_segments):
    """Sum rows of ``a`` into ``num_segments`` buckets given by ``segments``."""
    a = as_tensor(a)
    segments = np.asarray(segments, dtype=np.int64)
    out = _scatter_rows(a.data, segments, num_segments)
    return _result(out, (a,), lambda g: (g[segments],), "segment_sum")


def segment_mean(a, segments, num_segments):
    segments = np.asarray(segments, dtype=np.int64)
    counts = np.bincount(segments, minlength=num_segments).astype(np.float64)
    if np.any(counts == 0):
        raise ValueError("segment_mean: empty segment")
    shape = (num_segments,) + (1,) * (as_tensor(a).ndim - 1)
    return segment_sum(a, segments, num_segments) * (1.0 / counts).reshape(shape)


def segment_max(a, segments, num_segments):
    """Row-wise maximum per segment; the gradient flows to the first arg-max."""
    a = as_tensor(a)
    segments = np.asarray(segments, dtype=np.int64)
    if np.any(np.bincount(segments, minlength=num_segments) == 0):
        raise ValueError("segment_max: empty segment")
    out = np.full((num_segments,) + a.shape[1:], -np.inf)
    np.maximum.at(out, segments, a.data)
    hit = a.data == out[segments]
    # keep only the first winner per (segment, column)
    order = np.arange(len(segments))
    first = np.full(out.shape, len(segments), dtype=np.int64)
    cand = np.where(hit, order.reshape((-1,) + (1,) * (a.ndim - 1)), len(segments))
    np.minimum.at(first, segments, cand)
    winner = cand == first[segments]
    return _result(out, (a,), lambda g: (np.where(winner, g[segments], 0.0),), "segment_max")


# -- linear algebra ------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def linear(x, weight, bias=None):
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# -- normalizations and losses --------------------------------------------

def softmax_rows(x):
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got {x.shape}")
    if x.shape[1] == 0:
        raise ValueError("softmax_rows: empty row")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _result(out, (x,), back, "softmax_rows")


def log_softmax_rows(x):
    x = as_tensor(x)
    if x.shape[1] == 0:
        raise ValueError("log_softmax_rows: empty row")
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _result(out, (x,), back, "log_softmax_rows")


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under row logits."""
    labels = np.asarray(labels, dtype=np.int64)
    logp = log_softmax_rows(logits)
    n = logp.shape[0]
    onehot = np.zeros(logp.shape)
    onehot[np.arange(n), labels] = -1.0 / n
    return sum_(mul(logp, onehot))


NORM_EPS = 1e-12


def normalize_rows(x, eps=NORM_EPS):
    """Divide each row by its Euclidean norm, clamped below at ``eps``."""
    x = as_tensor(x)
    sq = sum_(mul(x, x), axis=-1, keepdims=True)
    small = sq.data < eps * eps
    if small.any():
        diagnostics["zero_norm_clamped"] += int(small.sum())
    return div(x, sqrt(clamp_min(sq, eps * eps)))


def cosine_similarity(u, v, eps=NORM_EPS):
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape or u.ndim != 1:
        raise ShapeError(f"cosine_similarity expects equal-length vectors, got {u.shape} and {v.shape}")
    un = normalize_rows(reshape(u, (1, -1)), eps)
    vn = normalize_rows(reshape(v, (1, -1)), eps)
    return sum_(mul(un, vn))


def detach(a):
    return Tensor(as_tensor(a).data)
