"""Representation decoupling: private/shared encoders, an independence
penalty, and the two-discriminator adversarial losses.

Sequences are mean-pooled over valid timesteps and pushed through two-layer
GeLU perceptrons: three private encoders (one per modality) and a single
shared one. Independence between each modality's private and shared vectors
is penalized with a batch statistic built from centered inner-product Gram
matrices. The shared path additionally plays an adversarial game against a
modality classifier through gradient reversal, each sample weighted by how
badly a separate linear classifier already recognizes its modality; the
private path trains the same classifier cooperatively.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .errors import ConfigError, DataError

ORDER = ("L", "V", "A")


def masked_mean_pool(Z, mask):
    """(n, T, d) -> (n, d), averaging valid steps only."""
    counts = np.asarray(mask).sum(axis=1)
    if (counts == 0).any():
        raise DataError("cannot pool a sequence with zero valid timesteps")
    s = ad.tsum(nn.apply_time_mask(Z, mask), axis=1)
    inv = (1.0 / counts).astype(Z.data.dtype)[:, None]
    return ad.mul(s, ad.Tensor(inv))


def last_valid_pool(Z, mask):
    """(n, T, d) -> (n, d), picking each sequence's last valid step."""
    m = np.asarray(mask)
    idx = m.shape[1] - 1 - np.argmax(m[:, ::-1], axis=1)
    if (m.sum(axis=1) == 0).any():
        raise DataError("cannot pool a sequence with zero valid timesteps")
    sel = np.zeros(Z.shape[:2], dtype=Z.data.dtype)
    sel[np.arange(m.shape[0]), idx] = 1.0
    return ad.tsum(ad.mul(Z, ad.Tensor(sel[:, :, None])), axis=1)


class Encoders:
    """Three private two-layer perceptrons plus one shared one."""

    def __init__(self, store, d, d_h, pooling="mean"):
        if pooling not in ("mean", "last"):
            raise DataError(f"unknown pooling mode: {pooling}")
        self.pool = masked_mean_pool if pooling == "mean" else last_valid_pool
        self.exclusive = {m: nn.Mlp2(store, f"enc/exclusive/{m}", d, d_h, d_h)
                          for m in ORDER}
        self.agnostic = nn.Mlp2(store, "enc/agnostic", d, d_h, d_h)

    def encode_exclusive(self, z_by_mod, mask_by_mod):
        return {m: self.exclusive[m](self.pool(z_by_mod[m], mask_by_mod[m]))
                for m in ORDER}

    def encode_agnostic(self, z_by_mod, mask_by_mod):
        return {m: self.agnostic(self.pool(z_by_mod[m], mask_by_mod[m]))
                for m in ORDER}


def hsic(H1, H2):
    """Centered inner-product dependence statistic, (n-1)^-2 Tr(U K1 U K2)."""
    n = H1.shape[0]
    if n < 2:
        raise DataError(f"need at least 2 samples, got {n}")
    K1 = ad.matmul(H1, ad.transpose(H1))
    K2 = ad.matmul(H2, ad.transpose(H2))
    dtype = H1.data.dtype
    U = ad.Tensor((np.eye(n) - 1.0 / n).astype(dtype))
    M = ad.matmul(ad.matmul(U, K1), U)
    # Tr(M K2) = sum(M * K2^T); K2 is symmetric
    tr = ad.tsum(ad.mul(M, K2))
    return ad.scale(tr, 1.0 / (n - 1) ** 2)


def disparity_loss(he_by_mod, ha_by_mod):
    total = None
    for m in ORDER:
        term = hsic(he_by_mod[m], ha_by_mod[m])
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / 3.0)


def separation_loss(he_by_mod, ha_by_mod):
    """Orthogonality-style alternative to the independence penalty: mean
    squared entry of the batch-averaged private/shared cross-moment matrix,
    averaged over modalities. Zero iff the two feature sets are orthogonal
    in expectation over the batch."""
    total = None
    for m in ORDER:
        He, Ha = he_by_mod[m], ha_by_mod[m]
        n = He.shape[0]
        C = ad.scale(ad.matmul(ad.transpose(He), Ha), 1.0 / n)
        term = ad.tmean(ad.mul(C, C))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / 3.0)


class Discriminators:
    """A linear importance classifier and a two-layer modality classifier."""

    def __init__(self, store, d_h, with_importance=True):
        # the importance head only exists when its weighting is in use, so
        # every created parameter receives gradients
        self.Wi = (store.weight("disc/importance/W", (d_h, 3), fan_in=d_h)
                   if with_importance else None)
        self.modality = nn.Mlp2(store, "disc/modality", d_h, d_h, 3)

    def importance_probs(self, h):
        return ad.masked_softmax(ad.matmul(h, self.Wi))

    def importance_degree(self, h_a_m, mod_index):
        """Per-sample weight 1 - p_true, detached from the encoder path."""
        probs = self.importance_probs(h_a_m.detach())
        p_true = probs.data[:, mod_index]
        return probs, 1.0 - p_true

    def modality_log_probs(self, h):
        return ad.log_softmax(self.modality(h))


def adversarial_losses(he_by_mod, ha_by_mod, disc, grl_lambda=1.0,
                       use_omega=True, grl_enabled=True):
    """Returns (shared-path loss, private-path loss, importance-training loss).

    The third term is the plain cross-entropy that teaches the linear
    importance classifier on detached shared vectors; it never touches the
    encoders.
    """
    n = he_by_mod["L"].shape[0]
    if use_omega and disc.Wi is None:
        raise ConfigError("importance weighting requested but the classifier "
                          "was built without its head")
    l_agn = None
    l_exc = None
    l_imp = None
    for mi, m in enumerate(ORDER):
        h_a = ha_by_mod[m]
        h_e = he_by_mod[m]
        if use_omega:
            _, omega = disc.importance_degree(h_a, mi)
        else:
            omega = np.ones(n)
        h_a_in = ad.gradient_reversal(h_a, grl_lambda) if grl_enabled else h_a
        lp_a = ad.take_index(disc.modality_log_probs(h_a_in), mi, axis=1)
        lp_e = ad.take_index(disc.modality_log_probs(h_e), mi, axis=1)
        w = ad.Tensor(np.asarray(omega, dtype=lp_a.data.dtype))
        term_a = ad.tsum(ad.mul(w, lp_a))
        term_e = ad.tsum(lp_e)
        l_agn = term_a if l_agn is None else ad.add(l_agn, term_a)
        l_exc = term_e if l_exc is None else ad.add(l_exc, term_e)

        if use_omega:
            imp = ad.tsum(ad.take_index(
                ad.log_softmax(ad.matmul(h_a.detach(), disc.Wi)), mi, axis=1))
            l_imp = imp if l_imp is None else ad.add(l_imp, imp)
    return (ad.scale(l_agn, -1.0 / n), ad.scale(l_exc, -1.0 / n),
            None if l_imp is None else ad.scale(l_imp, -1.0 / (3 * n)))
