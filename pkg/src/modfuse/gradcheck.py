"""Finite-difference verification across every module boundary.

Each component builds a tiny 64-bit instance (T <= 6, widths <= 8, batch
<= 4), runs a scalar-valued closure through the graph, and compares the
analytic gradients of the inputs plus a representative parameter selection
against central differences. The adversarial component runs with gradient
reversal and importance weighting switched off: reversal flips signs that
finite differences cannot see, and the importance weight is recomputed from
perturbed values while the analytic path treats it as a constant. Both
behaviors have dedicated direction tests elsewhere.
"""

from __future__ import annotations

import time

import numpy as np

from . import autodiff as ad
from . import nn
from .decouple import (Discriminators, Encoders, adversarial_losses,
                       disparity_loss, hsic, masked_mean_pool)
from .fusion import GraphFusion, PredictionHead, mse_loss, total_loss
from .hca import HcaTarget, Mru
from .psa import PsaLayer, Wal
from .unimodal import UnimodalExtractor

TOLERANCE = 1e-4
ORDER = ("L", "V", "A")


def _store(seed):
    return nn.ParamStore(np.random.default_rng(np.random.SeedSequence([743, seed])),
                         dtype=np.float64)


def _rng(seed):
    return np.random.default_rng(np.random.SeedSequence([811, seed]))


def _check_unimodal(seed):
    s = _store(seed)
    ext = UnimodalExtractor(s, "u", d_in=3, d=4, kernel=3, max_T=5)
    rng = _rng(seed)
    mask = np.array([[1, 1, 1, 0], [1, 1, 1, 1]], dtype=np.float64)
    x = ad.Tensor(rng.standard_normal((2, 4, 3)) * mask[:, :, None],
                  requires_grad=True)
    fn = lambda t, _w, _wx: ad.tsum(ext(t, mask))
    return ad.grad_check(fn, [x, ext.conv.w, ext.fwd.wx])


def _check_psa_layer(seed):
    s = _store(seed)
    layer = PsaLayer(s, "p", d=4, heads=2, with_chain=True, ffn_mult=2)
    rng = _rng(seed)
    mask = np.array([[1, 1, 1], [1, 1, 0]], dtype=np.float64)
    Z = ad.Tensor(rng.standard_normal((2, 3, 4)) * mask[:, :, None],
                  requires_grad=True)
    A_prev = ad.Tensor(rng.standard_normal((2, 2, 3, 3)), requires_grad=True)

    def fn(z, a_prev, _wq, _cw):
        out, _ = layer(z, mask, a_prev, mu=0.3)
        return ad.tsum(out)

    return ad.grad_check(fn, [Z, A_prev, layer.attn.wq.W, layer.predictor.w])


def _check_wal(seed):
    s = _store(seed)
    wal = Wal(s, "w", {"L": 2 * 3, "V": 3 * 3, "A": 4 * 3})
    rng = _rng(seed)
    zs = {m: ad.Tensor(rng.standard_normal((2, T, 3)), requires_grad=True)
          for m, T in (("L", 2), ("V", 3), ("A", 4))}

    def fn(zl, zv, za, _w, _p):
        _, out = wal({"L": zl, "V": zv, "A": za})
        return ad.add(ad.add(ad.tsum(out["L"]), ad.tsum(out["V"])),
                      ad.tsum(out["A"]))

    return ad.grad_check(fn, [zs["L"], zs["V"], zs["A"],
                              wal.params["L"]["W"], wal.params["V"]["P"]])


def _check_mru(seed):
    s = _store(seed)
    unit = Mru(s, "m", d=4, heads=2, ffn_mult=2)
    rng = _rng(seed)
    mask_s = np.array([[1, 1, 1, 0], [1, 1, 1, 1]], dtype=np.float64)
    mask_t = np.array([[1, 1], [1, 0]], dtype=np.float64)
    Z_s = ad.Tensor(rng.standard_normal((2, 4, 4)) * mask_s[:, :, None],
                    requires_grad=True)
    Z_t = ad.Tensor(rng.standard_normal((2, 2, 4)) * mask_t[:, :, None],
                    requires_grad=True)

    def fn(zs, zt, _wk, _g):
        out, _ = unit(zs, mask_s, zt, mask_t)
        return ad.tsum(out)

    return ad.grad_check(fn, [Z_s, Z_t, unit.attn.wk.W, unit.ln_t.g])


def _tiny_sequences(rng, d=4):
    masks = {"L": np.array([[1, 1], [1, 1]], dtype=np.float64),
             "V": np.array([[1, 1, 1], [1, 1, 0]], dtype=np.float64),
             "A": np.array([[1, 1, 1, 1], [1, 1, 1, 0]], dtype=np.float64)}
    z = {m: ad.Tensor(rng.standard_normal((2, mk.shape[1], d)) * mk[:, :, None],
                      requires_grad=True)
         for m, mk in masks.items()}
    return z, masks


def _check_hca_target(seed):
    s = _store(seed)
    unit = HcaTarget(s, "h", d=4, heads=2, ffn_mult=2)
    z, masks = _tiny_sequences(_rng(seed))

    def fn(zl, zv, za, _wq):
        out = unit("V", {"L": zl, "V": zv, "A": za}, masks)
        return ad.tsum(out)

    return ad.grad_check(fn, [z["L"], z["V"], z["A"], unit.mixed.attn.wq.W])


def _check_encoders(seed):
    s = _store(seed)
    enc = Encoders(s, 4, 3)
    z, masks = _tiny_sequences(_rng(seed))

    def fn(zl, zv, za, _w1, _w2):
        zd = {"L": zl, "V": zv, "A": za}
        he = enc.encode_exclusive(zd, masks)
        ha = enc.encode_agnostic(zd, masks)
        total = None
        for m in ORDER:
            part = ad.add(ad.tsum(he[m]), ad.tsum(ha[m]))
            total = part if total is None else ad.add(total, part)
        return total

    return ad.grad_check(fn, [z["L"], z["V"], z["A"],
                              enc.exclusive["L"].w1.W, enc.agnostic.w2.W])


def _check_hsic(seed):
    rng = _rng(seed)
    H1 = ad.Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    H2 = ad.Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    return ad.grad_check(hsic, [H1, H2])


def _pooled_reps(rng, n=3, dh=3):
    he = {m: ad.Tensor(rng.standard_normal((n, dh)), requires_grad=True)
          for m in ORDER}
    ha = {m: ad.Tensor(rng.standard_normal((n, dh)), requires_grad=True)
          for m in ORDER}
    return he, ha


def _check_disparity(seed):
    he, ha = _pooled_reps(_rng(seed))

    def fn(*ts):
        he_d = dict(zip(ORDER, ts[:3]))
        ha_d = dict(zip(ORDER, ts[3:]))
        return disparity_loss(he_d, ha_d)

    return ad.grad_check(fn, [he[m] for m in ORDER] + [ha[m] for m in ORDER])


def _check_adversarial(seed):
    s = _store(seed)
    disc = Discriminators(s, 3, with_importance=False)
    he, ha = _pooled_reps(_rng(seed))

    def fn(*ts):
        he_d = dict(zip(ORDER, ts[:3]))
        ha_d = dict(zip(ORDER, ts[3:6]))
        l_agn, l_exc, _ = adversarial_losses(he_d, ha_d, disc, use_omega=False,
                                             grl_enabled=False)
        return ad.add(l_agn, l_exc)

    inputs = [he[m] for m in ORDER] + [ha[m] for m in ORDER]
    return ad.grad_check(fn, inputs + [disc.modality.w1.W])


def _check_graph_fuse(seed):
    s = _store(seed)
    unit = GraphFusion(s, "g", 4)
    rng = _rng(seed)
    hs = [ad.Tensor(rng.standard_normal((2, 4)), requires_grad=True)
          for _ in range(3)]

    def fn(h1, h2, h3, _we, _ew):
        out, _ = unit({"L": h1, "V": h2, "A": h3})
        return ad.tsum(out)

    return ad.grad_check(fn, hs + [unit.We, unit.edge.W])


def _check_predict(seed):
    s = _store(seed)
    head = PredictionHead(s, 6, 4, "regression")
    rng = _rng(seed)
    h = ad.Tensor(rng.standard_normal((3, 6)), requires_grad=True)
    y = rng.standard_normal(3)
    fn = lambda t, _w: mse_loss(head(t), y)
    return ad.grad_check(fn, [h, head.net.w1.W])


def _check_total_loss(seed):
    s = _store(seed)
    disc = Discriminators(s, 3, with_importance=False)
    head = PredictionHead(s, 6, 4, "regression")
    rng = _rng(seed)
    he, ha = _pooled_reps(_rng(seed))
    y = rng.standard_normal(3)

    def fn(*ts):
        he_d = dict(zip(ORDER, ts[:3]))
        ha_d = dict(zip(ORDER, ts[3:6]))
        l_task = mse_loss(head(ad.concat([he_d["L"], ha_d["L"]], axis=1)), y)
        l_dis = disparity_loss(he_d, ha_d)
        l_agn, l_exc, _ = adversarial_losses(he_d, ha_d, disc, use_omega=False,
                                             grl_enabled=False)
        return total_loss(l_task, l_dis, l_agn, l_exc, alpha=0.02, beta=0.03)

    inputs = [he[m] for m in ORDER] + [ha[m] for m in ORDER]
    return ad.grad_check(fn, inputs + [head.net.w1.W])


COMPONENTS = {
    "unimodal": _check_unimodal,
    "psa_layer": _check_psa_layer,
    "wal": _check_wal,
    "mru": _check_mru,
    "hca_target": _check_hca_target,
    "encoders": _check_encoders,
    "hsic": _check_hsic,
    "disparity": _check_disparity,
    "adversarial_losses": _check_adversarial,
    "graph_fuse": _check_graph_fuse,
    "predict": _check_predict,
    "total_loss": _check_total_loss,
}


def gradcheck_all(seed=0):
    """Run every component once; returns {"errors", "max", "passed", "seconds"}."""
    t0 = time.time()
    errors = {}
    for name, fn in COMPONENTS.items():
        errors[name] = float(fn(seed))
    worst = max(errors.values())
    return {"errors": errors, "max": worst, "passed": worst < TOLERANCE,
            "seconds": time.time() - t0}


def format_report(report):
    lines = []
    for name, err in report["errors"].items():
        flag = "ok" if err < TOLERANCE else "FAIL"
        lines.append(f"{name:<20s} {err:12.3e}  {flag}")
    lines.append(f"{'max':<20s} {report['max']:12.3e}  "
                 f"{'ok' if report['passed'] else 'FAIL'}")
    return "\n".join(lines)
