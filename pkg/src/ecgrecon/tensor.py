"""Dense tensors with tape-based reverse-mode automatic differentiation.

Storage is 32-bit float by default; reductions accumulate in 64-bit and
cast back. A whole graph can be evaluated in float64 (pass dtype to the
leaf tensors) for finite-difference shadow checks.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _sum64(a, axis=None, keepdims=False):
    """Sum with 64-bit accumulation, cast back to the input dtype."""
    return np.sum(a, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)


class Tensor:
    """A dense array node in the autodiff tape."""

    def __init__(self, data, requires_grad=False, dtype=np.float32):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        g = np.asarray(g, dtype=self.dtype)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self):
        """Reverse sweep from a scalar; populates .grad on reachable leaves."""
        if self.data.size != 1:
            raise ShapeError("backward", self.shape)
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # leaves that never require grad keep grad=None
        for node in topo:
            if not node.requires_grad and node._backward is None:
                node.grad = None

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / np.asarray(other))

    def item(self):
        return float(self.data.reshape(()))


def _as_const(x, like):
    """Coerce a python/numpy value to an ndarray matching `like`'s dtype."""
    return np.asarray(x, dtype=like.dtype)


def _make(data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad or p._backward is not None for p in parents)
    out.grad = None
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _binary(a, b, fwd, bwd_a, bwd_b, name):
    if not isinstance(a, Tensor):
        a, b = b, a
        bwd_a, bwd_b = bwd_b, bwd_a
    if isinstance(b, Tensor):
        try:
            data = fwd(a.data, b.data)
        except ValueError:
            raise ShapeError(name, a.shape, b.shape)

        def backward(g):
            if a.requires_grad or a._backward is not None:
                a._accumulate(_unbroadcast(bwd_a(g, a.data, b.data), a.shape))
            if b.requires_grad or b._backward is not None:
                b._accumulate(_unbroadcast(bwd_b(g, a.data, b.data), b.shape))

        return _make(data, (a, b), backward)
    c = _as_const(b, a.data)
    try:
        data = fwd(a.data, c)
    except ValueError:
        raise ShapeError(name, a.shape, c.shape)

    def backward(g):
        a._accumulate(_unbroadcast(bwd_a(g, a.data, c), a.shape))

    return _make(data, (a,), backward)


def add(a, b):
    return _binary(a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g, "add")


def mul(a, b):
    return _binary(a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x, "mul")


def power(a, exponent):
    e = float(exponent)

    def backward(g):
        a._accumulate(g * e * np.power(a.data, e - 1.0))

    return _make(np.power(a.data, e), (a,), backward)


def exp(a):
    data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * data)

    return _make(data, (a,), backward)


def log(a):
    def backward(g):
        a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), backward)


def sqrt(a):
    data = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * 0.5 / data)

    return _make(data, (a,), backward)


def absolute(a):
    def backward(g):
        a._accumulate(g * np.sign(a.data))

    return _make(np.abs(a.data), (a,), backward)


def relu(a):
    mask = a.data > 0

    def backward(g):
        a._accumulate(g * mask)

    return _make(a.data * mask, (a,), backward)


def tensor_sum(a, axis=None, keepdims=False):
    data = _sum64(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(data, (a,), backward)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    else:
        n = a.shape[axis]
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad or a._backward is not None:
            a._accumulate(g @ b.data.T)
        if b.requires_grad or b._backward is not None:
            b._accumulate(a.data.T @ g)

    return _make(data, (a, b), backward)


def transpose(a):
    if a.data.ndim != 2:
        raise ShapeError("transpose", a.shape)

    def backward(g):
        a._accumulate(g.T)

    return _make(a.data.T.copy(), (a,), backward)


def reshape(a, shape):
    old = a.shape

    def backward(g):
        a._accumulate(g.reshape(old))

    return _make(a.data.reshape(shape), (a,), backward)


def concat(tensors, axis=1):
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad or t._backward is not None:
                t._accumulate(piece)

    return _make(data, tuple(tensors), backward)


def conv1d(x, w, b=None, stride=1, padding=0):
    """1-D convolution: x [B, Cin, T], w [Cout, Cin, K], b [Cout]."""
    if x.data.ndim != 3 or w.data.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv1d", x.shape, w.shape)
    B, Cin, T = x.shape
    Cout, _, K = w.shape
    t_out = (T + 2 * padding - K) // stride + 1
    if t_out < 1:
        raise ShapeError("conv1d", x.shape, w.shape)
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
    else:
        xp = x.data
    if K == 1 and stride == 1:
        # pointwise conv is a channel matmul
        data = np.einsum("oc,bct->bot", w.data[:, :, 0], xp, optimize=True)
    else:
        win = np.lib.stride_tricks.sliding_window_view(xp, K, axis=2)[:, :, ::stride, :]
        data = np.einsum("bctk,ock->bot", win, w.data, optimize=True)
    data = np.ascontiguousarray(data)
    if b is not None:
        data += b.data[None, :, None]

    def backward(g):
        if w.requires_grad or w._backward is not None:
            if K == 1 and stride == 1:
                gw = np.einsum("bot,bct->oc", g, xp, optimize=True)[:, :, None]
            else:
                win_ = np.lib.stride_tricks.sliding_window_view(xp, K, axis=2)[:, :, ::stride, :]
                gw = np.einsum("bctk,bot->ock", win_, g, optimize=True)
            w._accumulate(gw)
        if b is not None and (b.requires_grad or b._backward is not None):
            b._accumulate(_sum64(g, axis=(0, 2)))
        if x.requires_grad or x._backward is not None:
            gxp = np.zeros_like(xp)
            for k in range(K):
                contrib = np.einsum("bot,oc->bct", g, w.data[:, :, k], optimize=True)
                gxp[:, :, k:k + stride * t_out:stride] += contrib
            if padding:
                gxp = gxp[:, :, padding:-padding]
            x._accumulate(gxp)

    parents = (x, w) if b is None else (x, w, b)
    return _make(data, parents, backward)


def global_avg_pool(x):
    """Mean over the time axis: [B, C, T] -> [B, C]."""
    if x.data.ndim != 3:
        raise ShapeError("global_avg_pool", x.shape)
    return mean(x, axis=2)


def broadcast_over_time(v, t):
    """Tile a [B, C] tensor to [B, C, T]."""
    if v.data.ndim != 2:
        raise ShapeError("broadcast_over_time", v.shape)
    data = np.broadcast_to(v.data[:, :, None], v.shape + (t,)).copy()

    def backward(g):
        v._accumulate(_sum64(g, axis=2))

    return _make(data, (v,), backward)


def l2_normalize(x, eps=1e-12):
    """Normalize rows of the last axis to unit L2 norm."""
    sq = tensor_sum(mul(x, x), axis=-1, keepdims=True)
    norm = sqrt(add(sq, eps))
    return mul(x, power(norm, -1.0))
