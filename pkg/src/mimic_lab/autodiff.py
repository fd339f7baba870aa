"""Reverse-mode automatic differentiation over numpy arrays.

A small tape-style autograd engine: each operation returns a `Tensor` that
remembers its parents and a closure routing the incoming gradient to them.
`Tensor.backward()` topologically sorts the graph and runs every closure
once. Only the operations the policy/value networks and losses need are
implemented (dense layers, 1-d convolution over time, softmax, elementwise
math, reductions, slicing/concatenation).

Forward passes that never need gradients (environment rollouts, evaluation)
should run inside `no_grad()`; nothing is recorded there and the per-op cost
is a thin wrapper around the numpy call.
"""

from __future__ import annotations

import numpy as np

from .errors import MimicLabError

_GRAD_ENABLED = True


class no_grad:
    """Context manager disabling graph recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled():
    return _GRAD_ENABLED


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Array node of the computation graph.

    `requires_grad` marks trainable leaves; intermediate nodes inherit the
    need for gradients from their parents. `_lost_graph` marks results of
    grad-requiring computation performed under `no_grad()` — calling
    backward through them is an error rather than a silent zero.
    """

    __slots__ = ("data", "grad", "_parents", "_backward", "_needs", "requires_grad", "_lost_graph")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._needs = requires_grad
        self._lost_graph = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- graph machinery -----------------------------------------------------

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        if self._lost_graph:
            raise MimicLabError("no recorded computation graph (forward ran under no_grad)")
        if seed is None:
            if self.data.size != 1:
                raise MimicLabError("backward() needs a scalar or an explicit seed gradient")
            seed = np.ones_like(self.data)
        # Iterative topological sort; graphs can be a few thousand nodes deep.
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p._needs:
                    stack.append((p, False))
        self.grad = np.asarray(seed)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _accum(t, g):
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad = t.grad + g


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor(data)
    needs = any(p._needs for p in parents)
    if needs:
        if _GRAD_ENABLED:
            out._parents = tuple(parents)
            out._backward = backward
            out._needs = True
        else:
            out._lost_graph = True
    elif any(p._lost_graph for p in parents):
        out._lost_graph = True
    return out


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a._needs:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b._needs:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a._needs:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b._needs:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a._needs:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b._needs:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a._needs:
            _accum(a, _unbroadcast(g / b.data, a.data.shape))
        if b._needs:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(a.data / b.data, (a, b), backward)


def neg(a):
    a = as_tensor(a)

    def backward(g):
        _accum(a, -g)

    return _make(-a.data, (a,), backward)


def power(a, p):
    """a ** p for a constant exponent."""
    a = as_tensor(a)
    p = float(p)

    def backward(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _make(a.data**p, (a,), backward)


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), backward)


def log(a):
    a = as_tensor(a)

    def backward(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), backward)


def tanh(a):
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), backward)


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    mask = a.data >= b.data

    def backward(g):
        if a._needs:
            _accum(a, _unbroadcast(g * mask, a.data.shape))
        if b._needs:
            _accum(b, _unbroadcast(g * ~mask, b.data.shape))

    return _make(np.maximum(a.data, b.data), (a, b), backward)


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    mask = a.data <= b.data

    def backward(g):
        if a._needs:
            _accum(a, _unbroadcast(g * mask, a.data.shape))
        if b._needs:
            _accum(b, _unbroadcast(g * ~mask, b.data.shape))

    return _make(np.minimum(a.data, b.data), (a, b), backward)


def clip(a, lo, hi):
    return minimum(maximum(a, lo), hi)


# -- linear algebra and shape ops ---------------------------------------------


def matmul(a, b):
    """2-d (or batch-row) matrix product; b must be 2-d."""
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim != 2:
        raise MimicLabError(f"matmul expects a 2-d right operand, got {b.data.shape}")

    def backward(g):
        if a._needs:
            _accum(a, g @ b.data.T)
        if b._needs:
            ad = a.data.reshape(-1, a.data.shape[-1])
            _accum(b, ad.T @ g.reshape(-1, g.shape[-1]))

    return _make(a.data @ b.data, (a, b), backward)


def reshape(a, shape):
    a = as_tensor(a)
    orig = a.data.shape

    def backward(g):
        _accum(a, g.reshape(orig))

    return _make(a.data.reshape(shape), (a,), backward)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    in_shape = a.data.shape

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, in_shape).astype(a.data.dtype, copy=True))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, in_shape).astype(a.data.dtype, copy=True))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def getitem(a, idx):
    a = as_tensor(a)
    in_shape = a.data.shape
    in_dtype = a.data.dtype

    def backward(g):
        full = np.zeros(in_shape, dtype=in_dtype)
        np.add.at(full, idx, g)
        _accum(a, full)

    return _make(a.data[idx], (a,), backward)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t._needs:
                _accum(t, piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        for i, t in enumerate(tensors):
            if t._needs:
                _accum(t, np.take(g, i, axis=axis))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def softmax(a, axis=-1):
    """Numerically stable softmax with the exact Jacobian-vector backward."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        _accum(a, p * (g - inner))

    return _make(p, (a,), backward)


def conv1d(x, w, b, stride=1):
    """Valid 1-d convolution over the middle (time) axis.

    x: (B, T, F) input, w: (K, F, C) kernel, b: (C,) bias.
    Returns (B, L, C) with L = (T - K)//stride + 1.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    B, T, F = x.data.shape
    K, Fw, C = w.data.shape
    if Fw != F:
        raise MimicLabError(f"conv1d feature mismatch: input {F}, kernel {Fw}")
    if T < K:
        raise MimicLabError(f"conv1d window too short: length {T} < kernel {K}")
    L = (T - K) // stride + 1
    sB, sT, sF = x.data.strides
    windows = np.lib.stride_tricks.as_strided(
        x.data, shape=(B, L, K, F), strides=(sB, sT * stride, sT, sF), writeable=False
    )
    out_data = np.tensordot(windows, w.data, axes=([2, 3], [0, 1])) + b.data

    def backward(g):
        if b._needs:
            _accum(b, g.sum(axis=(0, 1)))
        if w._needs:
            _accum(w, np.tensordot(windows, g, axes=([0, 1], [0, 1])))
        if x._needs:
            gx = np.zeros_like(x.data)
            pos = stride * np.arange(L)
            for k in range(K):
                # per fixed k the window positions are distinct: plain fancy-index add
                gx[:, pos + k, :] += g @ w.data[k].T
            _accum(x, gx)

    return _make(out_data, (x, w, b), backward)


# -- operator sugar ------------------------------------------------------------

Tensor.__add__ = add
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = sub
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = mul
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__truediv__ = div
Tensor.__rtruediv__ = lambda self, other: div(other, self)
Tensor.__neg__ = neg
Tensor.__pow__ = power
Tensor.__matmul__ = matmul
Tensor.__getitem__ = getitem
Tensor.sum = tsum
Tensor.mean = tmean
Tensor.reshape = reshape
Tensor.exp = exp
Tensor.log = log
Tensor.tanh = tanh
