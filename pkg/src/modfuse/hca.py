"""Hierarchical cross-modal attention built from reinforcement units.

A unit lets the target sequence attend over a source sequence (queries from
the normalized target, keys/values from the normalized source), then applies
the usual residual and feed-forward steps; output length is the target's.

Per target modality, three granularities run in sequence: the target attends
over the three-way concatenation, then over the two other modalities, and
finally over each of them separately with the two results summed. Stacked
layers feed each layer's three outputs in as the next layer's inputs, sources
included. Any granularity can be switched off, in which case the next stage
consumes the previous stage's input unchanged.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .errors import ConfigError

ORDER = ("L", "V", "A")


class Mru:
    def __init__(self, store, name, d, heads, ffn_mult=4):
        self.ln_t = nn.LayerNorm(store, f"{name}/ln_t", d)
        self.ln_s = nn.LayerNorm(store, f"{name}/ln_s", d)
        self.attn = nn.MultiHeadAttention(store, f"{name}/attn", d, heads)
        self.ln2 = nn.LayerNorm(store, f"{name}/ln2", d)
        self.ffn = nn.Ffn(store, f"{name}/ffn", d, hidden_mult=ffn_mult)

    def __call__(self, Z_s, mask_s, Z_t, mask_t):
        Zt_n = self.ln_t(Z_t)
        Zs_n = self.ln_s(Z_s)
        logits = self.attn.logits(Zt_n, Zs_n)
        A = ad.masked_softmax(logits, nn.key_mask(mask_s))
        Za = ad.add(Zt_n, self.attn.context(A, Zs_n))
        out = ad.add(self.ffn(self.ln2(Za)), Za)
        return nn.apply_time_mask(out, mask_t), A


class HcaTarget:
    """Mixed, coarse, and fine units for one target modality."""

    def __init__(self, store, name, d, heads, ffn_mult=4):
        self.mixed = Mru(store, f"{name}/mixed", d, heads, ffn_mult)
        self.coarse = Mru(store, f"{name}/coarse", d, heads, ffn_mult)
        self.fine = [Mru(store, f"{name}/fine0", d, heads, ffn_mult),
                     Mru(store, f"{name}/fine1", d, heads, ffn_mult)]

    def __call__(self, target, z_by_mod, mask_by_mod, stages=("mixed", "coarse", "fine"),
                 collect_maps=None):
        others = [m for m in ORDER if m != target]
        mt = mask_by_mod[target]
        cur = z_by_mod[target]
        if "mixed" in stages:
            z_all = ad.concat([z_by_mod[m] for m in ORDER], axis=1)
            m_all = np.concatenate([mask_by_mod[m] for m in ORDER], axis=1)
            cur, _ = self.mixed(z_all, m_all, cur, mt)
        if "coarse" in stages:
            z_pair = ad.concat([z_by_mod[m] for m in others], axis=1)
            m_pair = np.concatenate([mask_by_mod[m] for m in others], axis=1)
            cur, _ = self.coarse(z_pair, m_pair, cur, mt)
        if "fine" in stages:
            a, map_a = self.fine[0](z_by_mod[others[0]], mask_by_mod[others[0]], cur, mt)
            b, map_b = self.fine[1](z_by_mod[others[1]], mask_by_mod[others[1]], cur, mt)
            cur = ad.add(a, b)
            if collect_maps is not None:
                collect_maps[target] = {others[0]: map_a.data.copy(),
                                        others[1]: map_b.data.copy()}
        return cur


class HcaStack:
    def __init__(self, store, d, heads, layers, ffn_mult=4):
        if layers < 1:
            raise ConfigError(f"need at least one layer, got {layers}")
        if d % heads != 0:
            raise ConfigError(f"width {d} not divisible by {heads} heads")
        self.layers = [
            {m: HcaTarget(store, f"hca/layer{l}/{m}", d, heads, ffn_mult) for m in ORDER}
            for l in range(layers)
        ]

    def __call__(self, z_by_mod, mask_by_mod, stages=("mixed", "coarse", "fine"),
                 collect_maps=None):
        cur = dict(z_by_mod)
        for layer in self.layers:
            cur = {m: layer[m](m, cur, mask_by_mod, stages, collect_maps) for m in ORDER}
        return cur
