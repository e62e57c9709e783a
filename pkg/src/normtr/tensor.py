"""Dense numpy tensors with reverse-mode automatic differentiation.

Every differentiable op builds a node that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent.  Nodes
carry a global sequence number, so ``backward`` can walk the reachable
graph in strict reverse execution order (the tape).

Leading batch dimensions are supported everywhere: ``matmul`` broadcasts
like ``np.matmul`` and elementwise ops broadcast like numpy.
"""
from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "tensor",
    "parameter",
    "no_grad",
    "default_dtype",
    "get_default_dtype",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "leaky_relu",
    "softmax_rows",
    "log_softmax",
    "cross_entropy",
    "mse",
    "grad_reverse",
    "layer_norm",
    "mean",
    "sum",
    "reshape",
    "swapaxes",
    "concat",
    "take",
    "backward",
    "zero_grads",
]

_seq = itertools.count()
_grad_enabled = True
_dtype = np.float32


class NonFiniteError(FloatingPointError):
    """Raised when a forward op produces NaN or Inf."""


def get_default_dtype():
    return _dtype


@contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for new tensors (e.g. float64 for gradchecks)."""
    global _dtype
    old, _dtype = _dtype, np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = old


@contextmanager
def no_grad():
    """Run ops without recording them (evaluation)."""
    global _grad_enabled
    old, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = old


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._parents = _parents
        self._backward = _backward
        self._seq = next(_seq)
        self.name = name

    # --- metadata -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor(self.data)

    # --- operators ----------------------------------------------------
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _index(self, idx)

    def backward(self):
        backward(self)


def tensor(data, requires_grad=False, name=None):
    return Tensor(np.asarray(data, dtype=_dtype), requires_grad=requires_grad, name=name)


def parameter(data, name=None):
    return tensor(data, requires_grad=True, name=name)


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_dtype))


def _make(out, parents, backward_fn, op):
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"non-finite value produced by {op} (shape {out.shape})")
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(out)
    return Tensor(out, requires_grad=True, _parents=parents, _backward=backward_fn)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# --- elementwise -------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(x, c):
    """Multiply by a Python constant."""
    x = _as_tensor(x)
    c = float(c)
    return _make(x.data * x.data.dtype.type(c), (x,), lambda g: (g * c,), "scale")


def leaky_relu(x, slope=0.01):
    """max(x, slope * x) for slope in (0, 1)."""
    x = _as_tensor(x)
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in (0, 1), got {slope}")
    s = x.data.dtype.type(slope)
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * s)
    return _make(out, (x,), lambda g: (np.where(pos, g, g * s),), "leaky_relu")


def grad_reverse(x, lam=1.0):
    """Gradient reversal: identity forward, upstream gradient times -lam backward."""
    if lam < 0:
        raise ValueError("grad_reverse lambda must be >= 0")
    x = _as_tensor(x)
    neg = -float(lam)
    return _make(x.data.copy(), (x,), lambda g: (g * g.dtype.type(neg),), "grad_reverse")


# --- linear algebra ----------------------------------------------------

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


# --- normalizations ----------------------------------------------------

def softmax_rows(x):
    """Softmax over the last axis, stabilized by subtracting the row max."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), bw, "softmax")


def log_softmax(x):
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then apply the affine ``gamma``/``beta``."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = ggam = gbet = None
        if x.requires_grad:
            gh = g * gamma.data
            n = x.shape[-1]
            gx = inv / n * (n * gh - gh.sum(axis=-1, keepdims=True)
                            - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
        if gamma.requires_grad:
            ggam = _unbroadcast(g * xhat, gamma.shape)
        if beta.requires_grad:
            gbet = _unbroadcast(g, beta.shape)
        return gx, ggam, gbet

    return _make(out, (x, gamma, beta), bw, "layer_norm")


# --- reductions and shape ops -----------------------------------------

def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    x = _as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape):
    x = _as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def swapaxes(x, a1, a2):
    x = _as_tensor(x)
    return _make(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),), "swapaxes")


def concat(xs, axis=0):
    xs = [_as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), bw, "concat")


def _is_basic(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(p is Ellipsis or p is None or isinstance(p, (slice, int, np.integer)) for p in parts)


def _index(x, idx):
    basic = _is_basic(idx)

    def bw(g):
        out = np.zeros_like(x.data)
        if basic:
            out[idx] = g  # basic indexing never repeats an element
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), bw, "index")


def take(x, indices, axis=0):
    """Select entries along ``axis`` (rows of a batch, say)."""
    x = _as_tensor(x)
    indices = np.asarray(indices, dtype=np.intp)

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, (slice(None),) * (axis % x.ndim) + (indices,), g)
        return (out,)

    return _make(np.take(x.data, indices, axis=axis), (x,), bw, "take")


# --- losses ------------------------------------------------------------

def cross_entropy(logits, labels):
    """Mean over the batch of -log softmax(logits)[label]."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy expects logits [b, C] and labels [b], got {logits.shape}, {labels.shape}")
    C = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise IndexError(f"label out of range [0, {C})")
    b = len(labels)
    logp = log_softmax(logits)
    picked = logp[np.arange(b), labels]
    return scale(sum(picked), -1.0 / b)


def mse(pred, target):
    """(1/b) * sum of squared errors for predictions of shape [b, 1] (or [b])."""
    pred = _as_tensor(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape[0] != target.shape[0]:
        raise ValueError(f"mse length mismatch: {pred.shape[0]} vs {target.shape[0]}")
    diff = sub(pred, target.reshape(pred.shape))
    return scale(sum(mul(diff, diff)), 1.0 / pred.shape[0])


# --- backward ----------------------------------------------------------

def backward(loss):
    """Accumulate d(loss)/d(node) into ``.grad`` of every reachable requires_grad node."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not on the tape (no input requires grad)")
    nodes, stack, seen = [], [loss], {id(loss)}
    while stack:
        node = stack.pop()
        nodes.append(node)
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack.append(p)
    nodes.sort(key=lambda n: n._seq, reverse=True)
    pending = {id(loss): np.ones_like(loss.data)}
    for node in nodes:
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = np.zeros_like(node.data)
        node.grad += g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


def zero_grads(params):
    for p in params:
        p.zero_grad()
