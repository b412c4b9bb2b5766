"""Minimal tape-free reverse-mode differentiation over numpy arrays.

Each :class:`Tensor` remembers the tensors it was computed from and a closure
that maps its output gradient to gradients of those parents. ``backward``
walks the graph in reverse topological order. Only the operations the toy
transformer and its losses need are provided; a few of them (layer norm,
softmax, cross-entropy, row normalization) are fused so their backward pass is
written out analytically, which keeps the Python overhead per training step low.

Plain numpy arrays mixed into an expression behave as constants: no gradient
is ever computed for them.
"""

from __future__ import annotations

import numpy as np

GELU_C = np.sqrt(2.0 / np.pi)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    # -- arithmetic -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.data.shape[a] for a in np.atleast_1d(axis)])
        return tsum(self, axis, keepdims) * (1.0 / n)

    def backward(self, grad=None):
        """Accumulate ``d self / d leaf`` into ``leaf.grad`` for every leaf requiring grad."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


def _topological(root):
    order = []
    seen = set()
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _value(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _needs(*xs):
    return any(isinstance(x, Tensor) and x.requires_grad for x in xs)


def _result(data, parents, backward):
    parents = tuple(p for p in parents)
    if not any(isinstance(p, Tensor) and p.requires_grad for p in parents):
        return Tensor(data)
    # constants are wrapped so zip(parents, grads) stays aligned
    wrapped = tuple(p if isinstance(p, Tensor) else Tensor(p) for p in parents)
    return Tensor(data, True, wrapped, backward)


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ------------------------------------------------------------

def add(a, b):
    av, bv = _value(a), _value(b)
    out = av + bv

    def backward(g):
        return unbroadcast(g, av.shape), unbroadcast(g, bv.shape)

    return _result(out, (a, b), backward)


def neg(a):
    if not isinstance(a, Tensor):
        return -np.asarray(a, dtype=np.float64)
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    av, bv = _value(a), _value(b)

    def backward(g):
        return unbroadcast(g * bv, av.shape), unbroadcast(g * av, bv.shape)

    return _result(av * bv, (a, b), backward)


def gelu(x):
    """Tanh approximation of GELU."""
    xv = x.data
    x2 = xv * xv
    inner = GELU_C * xv * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * xv * (1.0 + t)

    def backward(g):
        dinner = GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * dinner),)

    return _result(out, (x,), backward)


# -- shape ------------------------------------------------------------------

def reshape(x, shape):
    old = x.data.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def take(x, index):
    """Basic or advanced indexing; the backward pass scatters with ``np.add.at``."""
    shape = x.data.shape
    advanced = isinstance(index, np.ndarray) or (
        isinstance(index, tuple) and any(isinstance(i, (np.ndarray, list)) for i in index))

    def backward(g):
        full = np.zeros(shape)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _result(x.data[index], (x,), backward)


def tsum(x, axis=None, keepdims=False):
    shape = x.data.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def concat(tensors, axis=0):
    datas = [_value(t) for t in tensors]
    sizes = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(np.concatenate(datas, axis=axis), tuple(tensors), backward)


# -- linear algebra -----------------------------------------------------------

def matmul(a, b):
    av, bv = _value(a), _value(b)

    def backward(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        if bv.ndim == 2 and av.ndim > 2:
            # shared weight matrix: fold batch dims into one GEMM
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return unbroadcast(ga, av.shape), gb

    return _result(av @ bv, (a, b), backward)


# -- fused ops ----------------------------------------------------------------

def layer_norm(x, gain, bias, eps=1e-5):
    xv = x.data
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gv = _value(gain)
    out = xhat * gv + _value(bias)

    def backward(g):
        gx = g * gv
        gin = inv * (gx - gx.mean(axis=-1, keepdims=True)
                     - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gin, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _result(out, (x, gain, bias), backward)


def softmax(x, axis=-1, mask=None):
    """Softmax along ``axis``; entries where ``mask`` is False get probability 0."""
    xv = x.data
    if mask is not None:
        xv = np.where(mask, xv, -np.inf)
    z = xv - xv.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _result(p, (x,), backward)


def cross_entropy(logits, targets, weights=None, reduction="mean"):
    """Weighted negative log-likelihood of integer ``targets`` under row-wise softmax.

    ``logits`` has shape (..., V); ``weights`` (same shape as ``targets``) masks
    positions. ``reduction="mean"`` divides by the total weight, ``"sum"`` does not.
    """
    lv = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    w = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    z = lv - lv.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
    nll = lse - picked
    total = (w * nll).sum()
    if reduction == "mean":
        denom = w.sum()
        if denom <= 0:
            raise ValueError("cross_entropy over zero total weight")
    elif reduction == "sum":
        denom = 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    out = np.asarray(total / denom)

    def backward(g):
        p = np.exp(z - lse[..., None])
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        return ((p - onehot) * (w / denom)[..., None] * g,)

    if not isinstance(logits, Tensor):
        return Tensor(out)
    return _result(out, (logits,), backward)


def normalize_rows(x):
    """Scale each row (last axis) to unit Euclidean norm. Zero rows must be rejected by the caller."""
    xv = x.data
    norm = np.sqrt((xv * xv).sum(axis=-1, keepdims=True))
    y = xv / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _result(y, (x,), backward)


def masked_mean(x, mask):
    """Mean over axis 1 of a (B, T, d) tensor counting only positions where ``mask`` is set."""
    m = np.asarray(mask, dtype=np.float64)
    count = m.sum(axis=1, keepdims=True)
    weights = (m / count)[..., None]
    return tsum(x * weights, axis=1)


def masked_max(x, mask):
    """Max over axis 1 of a (B, T, d) tensor restricted to masked positions."""
    xv = np.where(np.asarray(mask, bool)[..., None], x.data, -np.inf)
    arg = xv.argmax(axis=1)
    b_idx, d_idx = np.meshgrid(np.arange(xv.shape[0]), np.arange(xv.shape[2]), indexing="ij")
    return take(x, (b_idx, arg, d_idx))
