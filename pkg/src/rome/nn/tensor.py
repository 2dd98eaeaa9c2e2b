"""Reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tensor` records the operation that produced it together with a
closure that pushes its gradient back to its parents.  Calling
:meth:`Tensor.backward` on a result walks the recorded tape in reverse
topological order.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LOG_FLOOR = 1e-12


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("grad must be given for non-scalar tensors")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.data.shape:
            raise ValueError(f"upstream grad shape {grad.shape} != {self.data.shape}")

        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        _accum(self, grad)
        for t in reversed(order):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g):
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _result(data, parents, backward, op):
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by '{op}'")
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=parents if req else (),
                  _backward=backward if req else None, op=op)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward, "add")


def neg(a):
    def backward(g):
        _accum(a, -g)

    return _result(-a.data, (a,), backward, "neg")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * out / b.data, b.shape))

    return _result(out, (a, b), backward, "div")


def relu(a):
    mask = a.data > 0

    def backward(g):
        _accum(a, g * mask)

    return _result(a.data * mask, (a,), backward, "relu")


def exp(a):
    out = np.exp(a.data)

    def backward(g):
        _accum(a, g * out)

    return _result(out, (a,), backward, "exp")


def log(a, floor=LOG_FLOOR):
    x = np.maximum(a.data, floor)
    live = a.data > floor

    def backward(g):
        _accum(a, g * live / x)

    return _result(np.log(x), (a,), backward, "log")


def sqrt(a):
    out = np.sqrt(a.data)

    def backward(g):
        _accum(a, g * 0.5 / np.where(out > 0, out, np.inf))

    return _result(out, (a,), backward, "sqrt")


def square(a):
    def backward(g):
        _accum(a, 2.0 * g * a.data)

    return _result(a.data * a.data, (a,), backward, "square")


# ---------------------------------------------------------------- shape ops

def reshape(a, shape):
    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), backward, "reshape")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                _accum(t, part)

    return _result(np.concatenate([t.data for t in tensors], axis=axis),
                   tuple(tensors), backward, "concat")


def tsum(a, axis=None, keepdims=False):
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def amax(a, axis=-1):
    """Max along one axis; the gradient goes to the first maximiser."""
    idx = np.expand_dims(a.data.argmax(axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, np.expand_dims(g, axis), axis=axis)
        _accum(a, ga)

    return _result(out, (a,), backward, "amax")


def amin(a, axis=-1):
    return neg(amax(neg(a), axis))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def linear(x, w, b=None):
    """``x @ w.T + b`` for ``x`` of shape (batch, in) and ``w`` of shape (out, in)."""
    parents = (x, w) if b is None else (x, w, b)
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def backward(g):
        if x.requires_grad:
            _accum(x, g @ w.data)
        if w.requires_grad:
            _accum(w, g.T @ x.data)
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=0))

    return _result(out, parents, backward, "linear")


def conv2d(x, w, b=None, stride=1, padding=1):
    """2-D cross-correlation, NCHW layout, square kernels."""
    X, W = x.data, w.data
    n, c, h, wd = X.shape
    o, ci, k, _ = W.shape
    if ci != c:
        raise ValueError(f"conv2d expects {ci} input channels, got {c}")
    s, p = stride, padding
    xp = np.pad(X, ((0, 0), (0, 0), (p, p), (p, p))) if p else X
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    ho, wo = win.shape[2], win.shape[3]
    out = np.tensordot(win, W, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        if w.requires_grad:
            _accum(w, np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])))
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            cols = np.tensordot(g, W, axes=([1], [0]))  # n, ho, wo, c, k, k
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += \
                        cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            _accum(x, gxp[:, :, p:p + h, p:p + wd] if p else gxp)

    return _result(out, parents, backward, "conv2d")


def avg_pool2d(x, kernel):
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise ValueError(f"avg_pool2d kernel {kernel} does not tile {h}x{w}")
    out = x.data.reshape(n, c, h // kernel, kernel, w // kernel, kernel).mean(axis=(3, 5))

    def backward(g):
        g = np.repeat(np.repeat(g, kernel, axis=2), kernel, axis=3) / (kernel * kernel)
        _accum(x, g)

    return _result(out, (x,), backward, "avg_pool2d")


# ---------------------------------------------------------------- probabilistic heads

def softmax(z, axis=-1):
    e = np.exp(z.data - z.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accum(z, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _result(out, (z,), backward, "softmax")


def log_softmax(z, axis=-1):
    shifted = z.data - z.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        _accum(z, g - probs * g.sum(axis=axis, keepdims=True))

    return _result(out, (z,), backward, "log_softmax")


def softmax_cross_entropy(logits, labels, reduce="mean"):
    """Cross-entropy of integer ``labels`` under ``softmax(logits)``, rows = samples."""
    labels = np.asarray(labels, dtype=np.int64)
    lp = log_softmax(logits)
    picked = pick(lp, labels)
    loss = neg(picked)
    return mean(loss) if reduce == "mean" else loss


def nll(probs, labels, reduce="mean", floor=LOG_FLOOR):
    """Cross-entropy of integer ``labels`` for rows that are already probabilities."""
    loss = neg(log(pick(probs, np.asarray(labels, dtype=np.int64)), floor))
    return mean(loss) if reduce == "mean" else loss


def pick(a, index):
    """Select ``a[i, index[i]]`` for every row ``i``."""
    rows = np.arange(a.shape[0])

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, index), g)
        _accum(a, ga)

    return _result(a.data[rows, index], (a,), backward, "pick")


# ---------------------------------------------------------------- signal-specific ops

def row_norm(x):
    """Euclidean norm of every row of a (batch, d) tensor, shape (batch, 1)."""
    return sqrt(tsum(square(x), axis=1, keepdims=True))


def scale_to_norm(x, radius):
    """Rescale each row of ``x`` to Euclidean norm ``radius`` (a scalar or per-row array)."""
    norm = row_norm(x)
    if np.any(norm.data == 0):
        raise ValueError("cannot rescale a zero-norm row")
    r = np.reshape(np.asarray(radius, dtype=np.float64), (-1, 1))
    return x * Tensor(r) / norm


def project_l2(x, eps):
    """Differentiable projection of each row onto the l2 ball of radius ``eps``."""
    eps = np.broadcast_to(np.reshape(np.asarray(eps, dtype=np.float64), (-1, 1)), (x.shape[0], 1))
    nrm = np.sqrt((x.data ** 2).sum(axis=1, keepdims=True))
    outside = nrm > eps
    if not outside.any():
        return x
    safe = np.where(outside, nrm, 1.0)
    # rows inside the ball get factor 1; rows outside get eps/||x|| with its gradient
    factor_val = np.where(outside, eps / safe, 1.0)
    out = x.data * factor_val

    def backward(g):
        gx = g * factor_val
        radial = (g * x.data).sum(axis=1, keepdims=True)
        gx = gx - np.where(outside, eps * radial * x.data / safe ** 3, 0.0)
        _accum(x, gx)

    return _result(out, (x,), backward, "project_l2")


def complex_scale(x, h):
    """Multiply complex symbols by per-row complex gains.

    ``x`` has shape (batch, 2k): the first k columns are real parts, the last k
    imaginary parts.  ``h`` is a complex scalar or a (batch,) complex array.
    """
    h = np.broadcast_to(np.asarray(h, dtype=np.complex128).reshape(-1), (x.shape[0],))
    a, b = h.real[:, None], h.imag[:, None]
    k = x.shape[1] // 2
    re, im = x.data[:, :k], x.data[:, k:]
    out = np.concatenate([a * re - b * im, b * re + a * im], axis=1)

    def backward(g):
        gre, gim = g[:, :k], g[:, k:]
        _accum(x, np.concatenate([a * gre + b * gim, -b * gre + a * gim], axis=1))

    return _result(out, (x,), backward, "complex_scale")


def minmax_normalize(a, tol=1e-12):
    """Min-max scale each row of a (batch, c) tensor to [0, 1].

    Rows whose range is below ``tol`` map to all-ones (and pass no gradient).
    """
    x = a.data
    lo_i, hi_i = x.argmin(axis=1), x.argmax(axis=1)
    rows = np.arange(x.shape[0])
    lo, hi = x[rows, lo_i][:, None], x[rows, hi_i][:, None]
    rng = hi - lo
    degenerate = rng <= tol
    safe = np.where(degenerate, 1.0, rng)
    y = np.where(degenerate, 1.0, (x - lo) / safe)

    def backward(g):
        g = np.where(degenerate, 0.0, g)
        s1 = g.sum(axis=1)
        sy = (g * y).sum(axis=1)
        gx = g / safe
        gx[rows, lo_i] += (sy - s1) / safe[:, 0]
        gx[rows, hi_i] -= sy / safe[:, 0]
        _accum(a, gx)

    return _result(y, (a,), backward, "minmax_normalize")
