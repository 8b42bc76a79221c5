"""Full model assembly and the late-fusion baseline.

The main model runs two parallel branches over the shared per-modality
extractor outputs: the self-attention branch feeds three private encoders,
the cross-modal branch feeds one shared encoder. The resulting six vectors
carry the decoupling losses, are fused per branch over a 3-node graph, and
the concatenated fused pair drives the prediction head. Every ablation flag
removes or swaps exactly one of these pieces.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .decouple import (Discriminators, Encoders, adversarial_losses,
                       disparity_loss, masked_mean_pool, separation_loss)
from .errors import ConfigError
from .fusion import (GraphFusion, PredictionHead, cross_entropy_loss,
                     mse_loss, total_loss)
from .hca import HcaStack
from .psa import PsaStack
from .unimodal import ExtractorBank

ORDER = ("L", "V", "A")


class FusionModel:
    def __init__(self, store, cfg, dims, maxima):
        self.cfg = cfg
        self.maxima = dict(maxima)
        self.extractors = ExtractorBank(store, dims, cfg.d, cfg.kernels(), maxima)

        if cfg.disable_psa:
            self.psa = None
        else:
            # a chain with mu=0 would create predictor parameters that never
            # receive gradients, so drop it outright in that case
            use_chain = (not cfg.disable_prediction_chain) and cfg.mu > 0.0
            self.psa = PsaStack(store, cfg.d, cfg.heads, cfg.psa_layers, maxima,
                                cfg.mu, use_chain=use_chain,
                                use_wal=not cfg.disable_wal)

        if cfg.disable_hca:
            self.hca = None
            self.stages = ()
        else:
            self.hca = HcaStack(store, cfg.d, cfg.heads, cfg.hca_layers)
            self.stages = tuple(
                s for s in ("mixed", "coarse", "fine")
                if not getattr(cfg, f"disable_mru_{s}"))

        self.encoders = Encoders(store, cfg.d, cfg.d_h, pooling=cfg.pooling)
        self.disc = (Discriminators(store, cfg.d_h,
                                    with_importance=not cfg.no_omega)
                     if cfg.beta > 0 else None)

        if cfg.disable_dgf:
            self.variant = "concat"
        elif cfg.use_feature_addition:
            self.variant = "add"
        elif cfg.use_feature_multiplication:
            self.variant = "mul"
        else:
            self.variant = "dgf"
        branch_width = 3 * cfg.d_h if self.variant == "concat" else cfg.d_h

        self.fuse_e = None
        self.fuse_a = None
        if self.variant == "dgf":
            if not cfg.use_only_agnostic:
                self.fuse_e = GraphFusion(store, "fuse/exclusive", cfg.d_h,
                                          self_loops=cfg.dgf_self_loops)
            if not cfg.use_only_exclusive:
                self.fuse_a = GraphFusion(store, "fuse/agnostic", cfg.d_h,
                                          self_loops=cfg.dgf_self_loops)

        branches = 1 if (cfg.use_only_exclusive or cfg.use_only_agnostic) else 2
        self.head = PredictionHead(store, branches * branch_width, cfg.d_h,
                                   cfg.mode, cfg.num_classes)

    def _fuse(self, unit, h_by_mod):
        if self.variant == "dgf":
            return unit(h_by_mod)
        hs = [h_by_mod[m] for m in ORDER]
        if self.variant == "concat":
            return ad.concat(hs, axis=1), None
        if self.variant == "add":
            return ad.add(ad.add(hs[0], hs[1]), hs[2]), None
        return ad.mul(ad.mul(hs[0], hs[1]), hs[2]), None

    def forward(self, batch, collect=None):
        """collect, when given, is a dict that receives attention maps under
        the keys "psa" and "hca"."""
        masks = batch.mask
        z = self.extractors(batch.x, masks)
        psa_maps = [] if collect is not None else None
        hca_maps = {} if collect is not None else None
        ze = self.psa(z, masks, collect_maps=psa_maps) if self.psa else z
        za = (self.hca(z, masks, stages=self.stages, collect_maps=hca_maps)
              if self.hca else z)
        he = self.encoders.encode_exclusive(ze, masks)
        ha = self.encoders.encode_agnostic(za, masks)

        fe = fa = None
        xi_e = xi_a = None
        if not self.cfg.use_only_agnostic:
            fe, xi_e = self._fuse(self.fuse_e, he)
        if not self.cfg.use_only_exclusive:
            fa, xi_a = self._fuse(self.fuse_a, ha)
        if fe is None:
            head_in = fa
        elif fa is None:
            head_in = fe
        else:
            head_in = ad.concat([fe, fa], axis=1)
        y = self.head(head_in)

        if collect is not None:
            collect["psa"] = psa_maps
            collect["hca"] = hca_maps
        return {"y": y, "he": he, "ha": ha, "fused_e": fe, "fused_a": fa,
                "xi_e": xi_e, "xi_a": xi_a}

    def losses(self, fwd, labels):
        """Returns (objective to backprop, {term: float} for logging).

        The logged "all" entry is task + alpha*dis + beta*(agn + exc); the
        optimized objective additionally carries the small cross-entropy that
        trains the importance classifier on detached vectors.
        """
        cfg = self.cfg
        if cfg.mode == "regression":
            l_task = mse_loss(fwd["y"], labels)
        else:
            l_task = cross_entropy_loss(fwd["y"], labels)
        if cfg.use_sep_loss:
            l_dis = separation_loss(fwd["he"], fwd["ha"])
        else:
            l_dis = disparity_loss(fwd["he"], fwd["ha"])
        if self.disc is not None:
            l_agn, l_exc, l_imp = adversarial_losses(
                fwd["he"], fwd["ha"], self.disc, use_omega=not cfg.no_omega)
        else:
            l_agn = l_exc = l_imp = None

        objective = total_loss(l_task, l_dis, l_agn, l_exc, cfg.alpha, cfg.beta)
        if l_imp is not None:
            objective = ad.add(objective, l_imp)

        def val(t):
            return float(t.data) if t is not None else float("nan")

        terms = {"task": val(l_task), "dis": val(l_dis), "agn": val(l_agn),
                 "exc": val(l_exc), "imp": val(l_imp)}
        reported = terms["task"] + cfg.alpha * terms["dis"]
        if self.disc is not None:
            reported += cfg.beta * (terms["agn"] + terms["exc"])
        terms["all"] = reported
        return objective, terms

    def predictions(self, fwd):
        """Numpy predictions: scores in regression, argmax in classification."""
        y = fwd["y"].data
        if self.cfg.mode == "regression":
            return y[:, 0].copy()
        return np.argmax(y, axis=1)


class LateFusionBaseline:
    """Per-modality extractors, masked mean pooling, concatenation, head."""

    def __init__(self, store, cfg, dims, maxima):
        self.cfg = cfg
        self.extractors = ExtractorBank(store, dims, cfg.d, cfg.kernels(), maxima)
        self.head = PredictionHead(store, 3 * cfg.d, cfg.d_h, cfg.mode,
                                   cfg.num_classes)

    def forward(self, batch, collect=None):
        z = self.extractors(batch.x, batch.mask)
        pooled = [masked_mean_pool(z[m], batch.mask[m]) for m in ORDER]
        y = self.head(ad.concat(pooled, axis=1))
        return {"y": y, "he": None, "ha": None}

    def losses(self, fwd, labels):
        if self.cfg.mode == "regression":
            l_task = mse_loss(fwd["y"], labels)
        else:
            l_task = cross_entropy_loss(fwd["y"], labels)
        value = float(l_task.data)
        return l_task, {"task": value, "dis": float("nan"), "agn": float("nan"),
                        "exc": float("nan"), "imp": float("nan"), "all": value}

    def predictions(self, fwd):
        y = fwd["y"].data
        if self.cfg.mode == "regression":
            return y[:, 0].copy()
        return np.argmax(y, axis=1)


def build_model(store, cfg, dims, maxima, kind="full"):
    if kind == "full":
        return FusionModel(store, cfg, dims, maxima)
    if kind == "late_fusion":
        return LateFusionBaseline(store, cfg, dims, maxima)
    raise ConfigError(f"unknown model kind: {kind!r}")
