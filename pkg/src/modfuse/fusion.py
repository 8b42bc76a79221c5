"""Graph fusion over the three per-modality vectors, the prediction head,
task losses, the combined objective, and evaluation metrics.

Fusion treats the three vectors as nodes of a complete directed graph with
self-loops. Every ordered pair is scored by a single affine map over the
concatenation of the two projected nodes, scores pass through GeLU and a
softmax over each node's neighborhood, and the final vector sums a sigmoid
of each node's weighted neighborhood aggregate. The private and shared
triples get independent parameter sets.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from . import nn
from .errors import ConfigError, DataError

ORDER = ("L", "V", "A")


class GraphFusion:
    def __init__(self, store, name, d_h, self_loops=True):
        self.We = store.weight(f"{name}/We", (d_h, d_h), fan_in=d_h)
        self.edge = nn.Linear(store, f"{name}/edge", 2 * d_h, 1)
        self.self_loops = self_loops

    def __call__(self, h_by_mod):
        n = h_by_mod["L"].shape[0]
        proj = [ad.matmul(h_by_mod[m], self.We) for m in ORDER]
        rows = []
        for i in range(3):
            cols = []
            for j in range(3):
                cols.append(self.edge(ad.concat([proj[i], proj[j]], axis=1)))
            rows.append(ad.concat(cols, axis=1))
        delta = ad.concat([ad.reshape(r, (n, 1, 3)) for r in rows], axis=1)
        scores = ad.gelu(delta)
        if self.self_loops:
            xi = ad.masked_softmax(scores)
        else:
            off_diag = (1.0 - np.eye(3)).reshape(1, 3, 3)
            xi = ad.masked_softmax(scores, np.broadcast_to(off_diag, (n, 3, 3)))
        out = None
        for i in range(3):
            inner = None
            for j in range(3):
                w = ad.slice_axis(ad.take_index(xi, i, axis=1), 1, j, j + 1)
                term = ad.mul(w, proj[j])
                inner = term if inner is None else ad.add(inner, term)
            s = ad.sigmoid(inner)
            out = s if out is None else ad.add(out, s)
        return out, xi


class PredictionHead:
    """Two affine maps with GeLU; width 1 in regression, C in classification."""

    def __init__(self, store, d_in, d_hidden, mode, num_classes=7):
        if mode not in ("regression", "classification"):
            raise ConfigError(f"unknown task mode: {mode}")
        out = 1 if mode == "regression" else num_classes
        self.mode = mode
        self.net = nn.Mlp2(store, "head", d_in, d_hidden, out)

    def __call__(self, h):
        return self.net(h)


def mse_loss(y_hat, y):
    r = ad.sub(ad.reshape(y_hat, (-1,)), ad.Tensor(np.asarray(y, dtype=y_hat.data.dtype)))
    return ad.tmean(ad.mul(r, r))


def cross_entropy_loss(logits, labels):
    labels = np.asarray(labels, dtype=np.int64)
    lp = ad.log_softmax(logits)
    onehot = np.zeros(logits.shape, dtype=logits.data.dtype)
    onehot[np.arange(labels.size), labels] = 1.0
    picked = ad.tsum(ad.mul(lp, ad.Tensor(onehot)))
    return ad.scale(picked, -1.0 / labels.size)


def total_loss(l_task, l_dis, l_agn, l_exc, alpha, beta):
    """l_task + alpha * l_dis + beta * (l_agn + l_exc), exact when a
    coefficient is zero (the corresponding term is simply not added)."""
    if alpha < 0 or beta < 0:
        raise ConfigError(f"loss coefficients must be nonnegative, got "
                          f"alpha={alpha} beta={beta}")
    out = l_task
    if alpha != 0.0 and l_dis is not None:
        out = ad.add(out, ad.scale(l_dis, alpha))
    if beta != 0.0 and l_agn is not None:
        out = ad.add(out, ad.scale(ad.add(l_agn, l_exc), beta))
    return out


# ---------------------------------------------------------------------------
# metrics

def _round_half_away(x):
    return math.floor(x + 0.5) if x >= 0 else math.ceil(x - 0.5)


def regression_metrics(preds, labels):
    """Seven-bin accuracy, binary accuracy/F1 over nonzero labels, MAE, and
    Pearson correlation (None when either side has zero variance)."""
    preds = np.asarray(preds, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if preds.size == 0:
        raise DataError("cannot compute metrics on an empty prediction set")
    if preds.shape != labels.shape:
        raise DataError(f"prediction/label shapes differ: {preds.shape} vs {labels.shape}")
    pr = np.clip([_round_half_away(p) for p in preds], -3, 3)
    lr = np.clip([_round_half_away(l) for l in labels], -3, 3)
    acc7 = float(np.mean(pr == lr))
    nz = labels != 0
    if nz.any():
        pos_pred = preds[nz] > 0
        pos_true = labels[nz] > 0
        acc2 = float(np.mean(pos_pred == pos_true))
        tp = float(np.sum(pos_pred & pos_true))
        fp = float(np.sum(pos_pred & ~pos_true))
        fn = float(np.sum(~pos_pred & pos_true))
        f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) > 0 else 0.0
    else:
        acc2 = None
        f1 = None
    mae = float(np.mean(np.abs(preds - labels)))
    sp = preds - preds.mean()
    sl = labels - labels.mean()
    denom = math.sqrt(float((sp * sp).sum()) * float((sl * sl).sum()))
    corr = float((sp * sl).sum() / denom) if denom > 0 else None
    return {"acc7": acc7, "acc2": acc2, "f1": f1, "mae": mae, "corr": corr,
            "n": int(preds.size)}


def classification_metrics(pred_classes, labels, num_classes):
    """One-vs-rest accuracy and F1 for each class."""
    pred_classes = np.asarray(pred_classes).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if pred_classes.size == 0:
        raise DataError("cannot compute metrics on an empty prediction set")
    per_class = {}
    for c in range(num_classes):
        tp = float(np.sum((pred_classes == c) & (labels == c)))
        fp = float(np.sum((pred_classes == c) & (labels != c)))
        fn = float(np.sum((pred_classes != c) & (labels == c)))
        tn = float(np.sum((pred_classes != c) & (labels != c)))
        acc = (tp + tn) / labels.size
        f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) > 0 else 0.0
        per_class[c] = {"acc": acc, "f1": f1}
    mean_f1 = float(np.mean([v["f1"] for v in per_class.values()]))
    return {"per_class": per_class, "mean_f1": mean_f1, "n": int(labels.size)}
