"""Predictive self-attention: per-modality stacks with a convolutional
prediction chain between layers and an adaptive three-way weighting of the
layer outputs.

Layer l >= 2 blends its own scaled dot-product logits with a 3x3-convolution
prediction made from layer l-1's raw logit maps:

    A = softmax(mu * GeLU(Conv(A_prev)) + (1 - mu) * softmax(A_cur))

The first layer, and any layer running at mu = 0 or with the chain disabled,
uses softmax(A_cur) alone; this keeps mu = 0 exactly equivalent to a chainless
stack. The raw (pre-softmax) logits are what travels down the chain.

Setting literal_mix=False switches to a single-softmax variant that mixes the
chain prediction directly with the raw logits; the printed two-softmax form is
the default.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .errors import ConfigError, ShapeError


class PsaLayer:
    def __init__(self, store, name, d, heads, with_chain, ffn_mult=4):
        self.heads = heads
        self.ln1 = nn.LayerNorm(store, f"{name}/ln1", d)
        self.attn = nn.MultiHeadAttention(store, f"{name}/attn", d, heads)
        self.ln2 = nn.LayerNorm(store, f"{name}/ln2", d)
        self.ffn = nn.Ffn(store, f"{name}/ffn", d, hidden_mult=ffn_mult)
        self.predictor = nn.Conv2d3x3(store, f"{name}/chain", heads) if with_chain else None

    def __call__(self, Z, mask, A_prev, mu, literal_mix=True):
        Zn = self.ln1(Z)
        A_cur = self.attn.logits(Zn, Zn)
        km = nn.key_mask(mask)
        if A_prev is None or mu == 0.0:
            A = ad.masked_softmax(A_cur, km)
        else:
            if self.predictor is None:
                raise ConfigError("layer received chained maps but has no predictor")
            if A_prev.shape != A_cur.shape:
                raise ShapeError(f"chained maps {A_prev.shape} do not match "
                                 f"current logits {A_cur.shape}")
            pred = ad.gelu(self.predictor(A_prev))
            if literal_mix:
                inner = ad.masked_softmax(A_cur, km)
            else:
                inner = A_cur
            mixed = ad.add(ad.scale(pred, mu), ad.scale(inner, 1.0 - mu))
            A = ad.masked_softmax(mixed, km)
        Ze = ad.add(Zn, self.attn.context(A, Zn))
        out = ad.add(self.ffn(self.ln2(Ze)), Ze)
        out = nn.apply_time_mask(out, mask)
        return out, A_cur


class Wal:
    """Per-modality scalar gates over flattened features, softmaxed 3-way."""

    def __init__(self, store, name, flat_dims):
        self.params = {}
        for m, fd in flat_dims.items():
            self.params[m] = {
                "W": store.weight(f"{name}/{m}/W", (fd, fd), fan_in=fd),
                "b": store.zeros(f"{name}/{m}/b", (fd,)),
                "P": store.weight(f"{name}/{m}/P", (fd, 1), fan_in=fd),
            }

    def __call__(self, z_by_mod):
        gammas = []
        for m in ("L", "V", "A"):
            Z = z_by_mod[m]
            n, T, d = Z.shape
            p = self.params[m]
            flat = ad.reshape(Z, (n, T * d))
            g = ad.matmul(ad.tanh(ad.add(ad.matmul(flat, ad.transpose(p["W"])), p["b"])),
                          p["P"])
            gammas.append(g)
        stacked = ad.concat(gammas, axis=1)
        psi = ad.masked_softmax(stacked)
        out = {}
        for i, m in enumerate(("L", "V", "A")):
            w = ad.reshape(ad.slice_axis(psi, 1, i, i + 1), (psi.shape[0], 1, 1))
            out[m] = ad.mul(z_by_mod[m], w)
        return psi, out


class PsaStack:
    """M layers per modality, chained; weighting applied after every layer."""

    def __init__(self, store, d, heads, layers, maxima, mu,
                 use_chain=True, use_wal=True, ffn_mult=4):
        if layers < 1:
            raise ConfigError(f"need at least one layer, got {layers}")
        if d % heads != 0:
            raise ConfigError(f"width {d} not divisible by {heads} heads")
        if not (0.0 <= mu <= 1.0):
            raise ConfigError(f"mixing coefficient must lie in [0, 1], got {mu}")
        self.mu = mu
        self.use_chain = use_chain
        self.layers = {}
        self.wals = []
        flat_dims = {m: maxima[m] * d for m in ("L", "V", "A")}
        for m in ("L", "V", "A"):
            self.layers[m] = [
                PsaLayer(store, f"psa/{m}/layer{l}", d, heads,
                         with_chain=use_chain and l > 0, ffn_mult=ffn_mult)
                for l in range(layers)
            ]
        for l in range(layers):
            self.wals.append(Wal(store, f"psa/wal{l}", flat_dims) if use_wal else None)

    def __call__(self, z_by_mod, mask_by_mod, literal_mix=True, collect_maps=None):
        cur = dict(z_by_mod)
        prev_logits = {m: None for m in cur}
        n_layers = len(self.layers["L"])
        for l in range(n_layers):
            nxt = {}
            logits = {}
            for m in ("L", "V", "A"):
                chained = prev_logits[m] if (self.use_chain and l > 0) else None
                nxt[m], logits[m] = self.layers[m][l](
                    cur[m], mask_by_mod[m], chained, self.mu, literal_mix)
            if self.wals[l] is not None:
                _, nxt = self.wals[l](nxt)
            if collect_maps is not None:
                collect_maps.append({m: logits[m].data.copy() for m in logits})
            cur = nxt
            prev_logits = logits
        return cur
