"""Reverse-mode automatic differentiation on numpy arrays.

A `Tensor` wraps an ndarray plus an optional backward-graph record
(parent tensors and a closure producing parent gradients). Calling
`backward` on a scalar walks the graph once in reverse topological
order, so gradient accumulation is additive and deterministic for a
fixed graph. The operator family is exactly what the fusion network
needs: dense/batched matmul, elementwise arithmetic, shape movement,
masked softmax, layer norm, GeLU/tanh/sigmoid, same-padded 1-D/2-D
convolution, dropout, and a gradient-reversal primitive whose forward
is the identity.

Values may be stored in float32; `grad_check` insists on float64.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import NumericalError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Global switch: when False, ops produce plain tensors with no graph.
_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """An n-dimensional value array with an optional gradient slot.

    `grad` stays None until a backward pass reaches this tensor.
    `_parents`/`_bwd` are populated only for tensors produced by an
    operator while gradients are enabled.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._bwd = None

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"expected a scalar tensor, got shape {self.data.shape}")

    def detach(self):
        """Same values, severed from the graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # Arithmetic sugar; the full operator set lives in module functions.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _make(data, parents, bwd):
    """Wrap an op result, keeping the graph only when it can matter."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = tuple(parents)
        out._bwd = bwd
        return out
    return Tensor(data)


def _topo_order(root):
    """Iterative post-order: every node appears after all its parents."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node in visited:
            continue
        visited.add(node)
        stack.append((node, True))
        for p in node._parents:
            if p not in visited:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate `grad` on every tensor reachable from a scalar loss."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._bwd is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._bwd(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += g


def _unbroadcast(g, shape):
    """Sum a gradient down to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b, opname):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} are not compatible") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bwd)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(out, (a, b), bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _make(out, (a, b), bwd)


def scale(a, s):
    """Multiply by a python scalar (cheaper than a full mul node)."""
    a = as_tensor(a)
    s = float(s)

    def bwd(g):
        return (g * s,)

    return _make(a.data * s, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b):
    """Dense or batched matrix product; operands must be >= 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ for shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)
    ad, bd = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(np.matmul(g, bd.swapaxes(-1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(ad.swapaxes(-1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), bwd)


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)

    def bwd(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(a.data, axes), (a,), bwd)


def swap_last2(a):
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape

    def bwd(g):
        return (g.reshape(old),)

    return _make(a.data.reshape(shape), (a,), bwd)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), bwd)


def slice_axis(a, axis, start, stop):
    """Contiguous slice along one axis; backward zero-pads."""
    a = as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _make(a.data[idx], (a,), bwd)


def take_index(a, index, axis):
    """Select one index along an axis, dropping that axis."""
    a = as_tensor(a)
    out = np.take(a.data, index, axis=axis)
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape, dtype=g.dtype)
        sel = [slice(None)] * len(shape)
        sel[axis] = index
        full[tuple(sel)] = g
        return (full,)

    return _make(out, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gx = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gx, shape).copy(),)

    return _make(out, (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        denom = a.size
    else:
        denom = a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / denom)


# ---------------------------------------------------------------------------
# nonlinearities and normalization

def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), bwd)


def sigmoid(a):
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), bwd)


def gelu(a):
    """Exact erf-based GeLU: 0.5 x (1 + erf(x / sqrt 2))."""
    a = as_tensor(a)
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * phi

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (phi + x * pdf),)

    return _make(out, (a,), bwd)


def masked_softmax(a, mask=None):
    """Softmax over the last axis with optional validity mask.

    Masked positions get exactly 0 probability; the rest renormalize.
    A row with no valid position yields all zeros rather than raising,
    so fully padded rows contribute nothing downstream.
    """
    a = as_tensor(a)
    x = a.data
    if mask is None:
        m = None
        shifted = x - x.max(axis=-1, keepdims=True)
        num = np.exp(shifted)
        den = num.sum(axis=-1, keepdims=True)
        p = num / den
    else:
        m = np.broadcast_to(np.asarray(mask) > 0, x.shape)
        neg = np.where(m, x, -np.inf)
        rowmax = neg.max(axis=-1, keepdims=True)
        rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
        num = np.where(m, np.exp(x - rowmax), 0.0)
        den = num.sum(axis=-1, keepdims=True)
        p = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    p = p.astype(x.dtype, copy=False)

    def bwd(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - inner),)

    return _make(p, (a,), bwd)


def log_softmax(a):
    """Numerically stable log of softmax over the last axis (loss side)."""
    a = as_tensor(a)
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def bwd(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), bwd)


def layer_norm(a, gamma, beta, eps=1e-6):
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = y * gamma.data + beta.data
    d = x.shape[-1]

    def bwd(g):
        gy = g * gamma.data
        gmean = gy.mean(axis=-1, keepdims=True)
        gymean = (gy * y).mean(axis=-1, keepdims=True)
        gx = inv * (gy - gmean - y * gymean)
        ggamma = _unbroadcast(g * y, gamma.shape)
        gbeta = _unbroadcast(g, beta.shape)
        return gx, ggamma, gbeta

    del d
    return _make(out, (a, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# convolutions (stride 1, same-length zero padding, odd kernels)

def conv1d(a, w, b=None):
    """Temporal convolution: a (n,T,c_in), w (k,c_in,c_out), b (c_out)."""
    a, w = as_tensor(a), as_tensor(w)
    k, c_in, c_out = w.shape
    if k % 2 != 1:
        raise ShapeError(f"conv1d kernel size must be odd, got {k}")
    if a.ndim != 3 or a.shape[-1] != c_in:
        raise ShapeError(f"conv1d: input {a.shape} does not match kernel {w.shape}")
    n, T, _ = a.shape
    pad = k // 2
    xp = np.pad(a.data, ((0, 0), (pad, pad), (0, 0)))
    out = np.zeros((n, T, c_out), dtype=a.dtype)
    for tap in range(k):
        out += np.matmul(xp[:, tap:tap + T, :], w.data[tap])
    parents = [a, w]
    if b is not None:
        b = as_tensor(b)
        out += b.data
        parents.append(b)

    def bwd(g):
        gx_pad = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for tap in range(k):
            gx_pad[:, tap:tap + T, :] += np.matmul(g, w.data[tap].T)
            gw[tap] = np.tensordot(xp[:, tap:tap + T, :], g, axes=([0, 1], [0, 1]))
        gx = gx_pad[:, pad:pad + T, :]
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 1))

    return _make(out, tuple(parents), bwd)


def conv2d(a, w, b=None):
    """Channelled 2-D convolution: a (n,c_in,H,W), w (c_out,c_in,kh,kw)."""
    a, w = as_tensor(a), as_tensor(w)
    c_out, c_in, kh, kw = w.shape
    if kh % 2 != 1 or kw % 2 != 1:
        raise ShapeError(f"conv2d kernel dims must be odd, got {(kh, kw)}")
    if a.ndim != 4 or a.shape[1] != c_in:
        raise ShapeError(f"conv2d: input {a.shape} does not match kernel {w.shape}")
    n, _, H, W = a.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(a.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((n, c_out, H, W), dtype=a.dtype)
    for i in range(kh):
        for j in range(kw):
            out += np.einsum("ncij,oc->noij", xp[:, :, i:i + H, j:j + W],
                             w.data[:, :, i, j], optimize=True)
    parents = [a, w]
    if b is not None:
        b = as_tensor(b)
        out += b.data.reshape(1, c_out, 1, 1)
        parents.append(b)

    def bwd(g):
        gx_pad = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for i in range(kh):
            for j in range(kw):
                gx_pad[:, :, i:i + H, j:j + W] += np.einsum(
                    "noij,oc->ncij", g, w.data[:, :, i, j], optimize=True)
                gw[:, :, i, j] = np.einsum("noij,ncij->oc", g,
                                           xp[:, :, i:i + H, j:j + W], optimize=True)
        gx = gx_pad[:, :, ph:ph + H, pw:pw + W]
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(out, tuple(parents), bwd)


# ---------------------------------------------------------------------------
# regularization and special backward behaviour

def dropout(a, p, rng, train=True):
    """Inverted dropout; identity when p == 0 or not training."""
    a = as_tensor(a)
    if not train or p <= 0.0:
        return a
    keep = 1.0 - p
    m = (rng.random(a.shape) < keep).astype(a.dtype) / keep

    def bwd(g):
        return (g * m,)

    return _make(a.data * m, (a,), bwd)


def gradient_reversal(a, lam=1.0):
    """Identity forward; backward multiplies the upstream gradient by -lam."""
    a = as_tensor(a)
    lam = float(lam)

    def bwd(g):
        return (-lam * g,)

    return _make(a.data, (a,), bwd)


def detach(a):
    return as_tensor(a).detach()


# ---------------------------------------------------------------------------
# finite-difference gradient checking (float64 only)

def grad_check(fn, inputs, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    `fn(*inputs)` must return a scalar Tensor and be pure. Each entry of
    each input is perturbed in place by +-eps; the error for an entry is
    |analytic - fd| / max(1, |analytic|, |fd|) and the max over all
    entries is returned.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.data.dtype != np.float64:
            raise TypeError("grad_check requires float64 inputs")
        t.requires_grad = True
        t.grad = None
    out = fn(*inputs)
    if out.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {out.data.shape}")
    if not np.isfinite(out.data).all():
        raise NumericalError("non-finite forward value in grad_check")
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for t, an in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        an_flat = an.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = fn(*inputs).data.reshape(-1)[0]
            flat[i] = orig - eps
            f_minus = fn(*inputs).data.reshape(-1)[0]
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericalError(f"non-finite forward value at input entry {i}")
            fd = (f_plus - f_minus) / (2.0 * eps)
            err = abs(an_flat[i] - fd) / max(1.0, abs(an_flat[i]), abs(fd))
            if err > worst:
                worst = err
    return worst
