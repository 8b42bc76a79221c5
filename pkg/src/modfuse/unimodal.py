"""Per-modality sequence extractor: temporal conv, positions, BiLSTM.

Each modality gets its own parameters. Raw features of width d_m are
compressed to the common width d by a same-length 1-D convolution, a fixed
sinusoidal position table is added, padded steps are zeroed, and a
bidirectional LSTM (d/2 per direction, concatenated) produces the final
sequence. Both directions run over the full padded length; padded steps feed
zeros in and are zeroed again on the way out, so downstream masking stays
exact.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .errors import ConfigError, ShapeError


class Lstm:
    """Single-direction LSTM with the standard i, f, g, o gate block."""

    def __init__(self, store, name, d_in, hidden):
        self.hidden = hidden
        self.wx = store.weight(f"{name}/wx", (d_in, 4 * hidden), fan_in=d_in)
        self.wh = store.weight(f"{name}/wh", (hidden, 4 * hidden), fan_in=hidden)
        self.b = store.zeros(f"{name}/b", (4 * hidden,))

    def __call__(self, x, reverse=False):
        n, T, _ = x.shape
        H = self.hidden
        # one big input projection for all timesteps, then the recurrence
        xz = ad.add(ad.matmul(x, self.wx), self.b)
        steps = range(T - 1, -1, -1) if reverse else range(T)
        h = None
        c = None
        outs = [None] * T
        for t in steps:
            z = ad.take_index(xz, t, axis=1)
            if h is not None:
                z = ad.add(z, ad.matmul(h, self.wh))
            i = ad.sigmoid(ad.slice_axis(z, 1, 0, H))
            f = ad.sigmoid(ad.slice_axis(z, 1, H, 2 * H))
            g = ad.tanh(ad.slice_axis(z, 1, 2 * H, 3 * H))
            o = ad.sigmoid(ad.slice_axis(z, 1, 3 * H, 4 * H))
            ig = ad.mul(i, g)
            c = ig if c is None else ad.add(ad.mul(f, c), ig)
            h = ad.mul(o, ad.tanh(c))
            outs[t] = h
        return ad.concat([ad.reshape(ht, (n, 1, H)) for ht in outs], axis=1)


class UnimodalExtractor:
    def __init__(self, store, name, d_in, d, kernel, max_T):
        if d % 2 != 0:
            raise ConfigError(f"common width d must be even, got {d}")
        if kernel % 2 != 1:
            raise ConfigError(f"conv kernel must be odd, got {kernel}")
        self.d_in = d_in
        self.d = d
        self.conv = nn.Conv1d(store, f"{name}/conv", kernel, d_in, d)
        self.fwd = Lstm(store, f"{name}/lstm_f", d, d // 2)
        self.bwd = Lstm(store, f"{name}/lstm_b", d, d // 2)
        self.pos = nn.sinusoid_table(max_T, d, dtype=store.dtype)

    def __call__(self, x, mask):
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"expected feature width {self.d_in}, got {x.shape[-1]}")
        T = x.shape[1]
        z = ad.add(self.conv(x), ad.Tensor(self.pos[:T]))
        z = nn.apply_time_mask(z, mask)
        hf = self.fwd(z, reverse=False)
        hb = self.bwd(z, reverse=True)
        out = ad.concat([hf, hb], axis=2)
        return nn.apply_time_mask(out, mask)


class ExtractorBank:
    """The three per-modality extractors with disjoint parameters."""

    def __init__(self, store, dims, d, kernels, maxima):
        self.extractors = {
            m: UnimodalExtractor(store, f"unimodal/{m}", dims[m], d, kernels[m], maxima[m])
            for m in ("L", "V", "A")
        }

    def __call__(self, batch_x, batch_mask):
        return {m: ext(ad.as_tensor(batch_x[m]), batch_mask[m])
                for m, ext in self.extractors.items()}
