"""Parameter management and the small layer vocabulary the model is built from.

Parameters live in a flat `ParamStore` keyed by slash-delimited names, so the
optimizer and checkpoint code see one ordered dict regardless of module
nesting. Initialization is uniform in +-1/sqrt(fan_in) for weights and zero
for biases, drawn from a generator owned by the store.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .errors import ShapeError


class ParamStore:
    """Flat registry of named trainable tensors."""

    def __init__(self, rng, dtype=np.float32):
        self.rng = rng
        self.dtype = np.dtype(dtype)
        self._params = {}

    def weight(self, name, shape, fan_in=None):
        if fan_in is None:
            fan_in = shape[0] if len(shape) > 1 else shape[0]
        bound = 1.0 / math.sqrt(fan_in)
        data = self.rng.uniform(-bound, bound, size=shape).astype(self.dtype)
        return self._register(name, data)

    def zeros(self, name, shape):
        return self._register(name, np.zeros(shape, dtype=self.dtype))

    def ones(self, name, shape):
        return self._register(name, np.ones(shape, dtype=self.dtype))

    def _register(self, name, data):
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = ad.Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def items(self):
        return self._params.items()

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None

    def n_values(self):
        return sum(t.size for t in self._params.values())


class Linear:
    def __init__(self, store, name, d_in, d_out, bias=True):
        self.W = store.weight(f"{name}/W", (d_in, d_out), fan_in=d_in)
        self.b = store.zeros(f"{name}/b", (d_out,)) if bias else None

    def __call__(self, x):
        out = ad.matmul(x, self.W)
        if self.b is not None:
            out = ad.add(out, self.b)
        return out


class LayerNorm:
    def __init__(self, store, name, d, eps=1e-6):
        self.g = store.ones(f"{name}/g", (d,))
        self.b = store.zeros(f"{name}/b", (d,))
        self.eps = eps

    def __call__(self, x):
        return ad.layer_norm(x, self.g, self.b, eps=self.eps)


class Ffn:
    """Two affine maps with GeLU between, hidden width a multiple of d."""

    def __init__(self, store, name, d, hidden_mult=4):
        h = hidden_mult * d
        self.w1 = Linear(store, f"{name}/1", d, h)
        self.w2 = Linear(store, f"{name}/2", h, d)

    def __call__(self, x):
        return self.w2(ad.gelu(self.w1(x)))


class Mlp2:
    """d_in -> hidden -> d_out with GeLU, used by encoders and discriminators."""

    def __init__(self, store, name, d_in, hidden, d_out):
        self.w1 = Linear(store, f"{name}/1", d_in, hidden)
        self.w2 = Linear(store, f"{name}/2", hidden, d_out)

    def __call__(self, x):
        return self.w2(ad.gelu(self.w1(x)))


class Conv1d:
    def __init__(self, store, name, kernel, c_in, c_out):
        self.w = store.weight(f"{name}/w", (kernel, c_in, c_out), fan_in=kernel * c_in)
        self.b = store.zeros(f"{name}/b", (c_out,))

    def __call__(self, x):
        return ad.conv1d(x, self.w, self.b)


class Conv2d3x3:
    def __init__(self, store, name, channels):
        self.w = store.weight(f"{name}/w", (channels, channels, 3, 3), fan_in=channels * 9)
        self.b = store.zeros(f"{name}/b", (channels,))

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b)


def sinusoid_table(T, d, dtype=np.float32):
    """Fixed sin/cos positional table, (T, d)."""
    pos = np.arange(T)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, 2 * (i // 2) / d)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype)


def split_heads(x, K):
    """(n, T, d) -> (n, K, T, d/K); head h takes columns [h*dk, (h+1)*dk)."""
    n, T, d = x.shape
    if d % K != 0:
        raise ShapeError(f"width {d} not divisible by {K} heads")
    dk = d // K
    return ad.transpose(ad.reshape(x, (n, T, K, dk)), (0, 2, 1, 3))


def merge_heads(x):
    """(n, K, T, dk) -> (n, T, K*dk), inverse of split_heads."""
    n, K, T, dk = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (n, T, K * dk))


class MultiHeadAttention:
    """Scaled dot-product attention with separate query and key/value inputs.

    Returns (merged context after the output projection, raw per-head logits).
    The key mask zeroes masked positions exactly inside the softmax.
    """

    def __init__(self, store, name, d, heads):
        self.heads = heads
        self.d = d
        self.wq = Linear(store, f"{name}/q", d, d, bias=False)
        self.wk = Linear(store, f"{name}/k", d, d, bias=False)
        self.wv = Linear(store, f"{name}/v", d, d, bias=False)
        self.wo = Linear(store, f"{name}/o", d, d, bias=False)

    def logits(self, zq, zk):
        Q = split_heads(self.wq(zq), self.heads)
        Kh = split_heads(self.wk(zk), self.heads)
        dk = self.d // self.heads
        return ad.scale(ad.matmul(Q, ad.swap_last2(Kh)), 1.0 / math.sqrt(dk))

    def context(self, probs, zk):
        Vh = split_heads(self.wv(zk), self.heads)
        return self.wo(merge_heads(ad.matmul(probs, Vh)))


def key_mask(mask):
    """(n, T) validity mask -> (n, 1, 1, T) broadcastable over head logits."""
    return np.asarray(mask)[:, None, None, :]


def apply_time_mask(x, mask):
    """Zero padded timesteps of (n, T, d) features; differentiable."""
    m = np.asarray(mask, dtype=x.data.dtype)[:, :, None]
    return ad.mul(x, ad.Tensor(m))
