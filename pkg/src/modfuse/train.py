"""Training loop, evaluation, linear probing, and parameter sweeps.

Artifacts land in the run's output directory: losses.csv (one row per
optimizer step), metrics.csv (one row per validation pass plus the final
test row), config.txt (the resolved configuration), best.ckpt (parameters
at the best validation score), and optional reps.csv / attention_*.csv
dumps from evaluation.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import os

import numpy as np

from . import autodiff as ad
from . import data as D
from . import nn
from .config import RunConfig
from .errors import ConfigError, DivergenceError
from .fusion import classification_metrics, regression_metrics
from .model import build_model
from .optim import Adam, load_checkpoint, restore_into, save_checkpoint

ORDER = ("L", "V", "A")

REGRESSION_METRIC_COLUMNS = ["mae", "acc7", "acc2", "f1", "corr", "n"]
CLASSIFICATION_METRIC_COLUMNS = ["mean_f1", "n"]
LOSS_COLUMNS = ["step", "epoch", "task", "dis", "agn", "exc", "imp", "all"]


def split_indices(n, seed):
    """Deterministic 70/10/20 train/val/test permutation split."""
    rng = np.random.default_rng(np.random.SeedSequence([271, seed]))
    perm = rng.permutation(n)
    n_train = int(round(0.7 * n))
    n_val = int(round(0.1 * n))
    return (perm[:n_train], perm[n_train:n_train + n_val],
            perm[n_train + n_val:])


def load_source(cfg):
    """Materialize the configured dataset.

    Returns (samples, dims, maxima, num_classes)."""
    if cfg.data == "synthetic":
        spec = D.GeneratorSpec(mode=cfg.mode)
        samples = D.generate_synthetic(cfg.n_samples, seed=cfg.seed, spec=spec)
        if cfg.mode == "classification" and cfg.num_classes != D.NUM_CLASSES:
            raise ConfigError(f"synthetic data has {D.NUM_CLASSES} classes, "
                              f"config says {cfg.num_classes}")
        dims = D.dataset_dims(samples)
        maxima = D.dataset_maxima(samples)
        return samples, dims, maxima, D.NUM_CLASSES
    samples, header = D.load_dataset(cfg.data)
    if header["mode"] != cfg.mode:
        raise ConfigError(f"dataset mode {header['mode']!r} does not match "
                          f"config mode {cfg.mode!r} (keys: mode)")
    n_classes = header.get("num_classes", D.NUM_CLASSES)
    if cfg.mode == "classification" and n_classes != cfg.num_classes:
        raise ConfigError(f"dataset has {n_classes} classes, config says "
                          f"{cfg.num_classes} (keys: num_classes)")
    return samples, header["dims"], header["maxima"], n_classes


def _finite(terms):
    return all(math.isfinite(v) or math.isnan(v) for v in terms.values()) and \
        math.isfinite(terms["all"]) and math.isfinite(terms["task"])


def evaluate_model(model, batches):
    preds = []
    labels = []
    with ad.no_grad():
        for batch in batches:
            fwd = model.forward(batch)
            preds.append(model.predictions(fwd))
            labels.append(batch.labels)
    preds = np.concatenate(preds)
    labels = np.concatenate(labels)
    if model.cfg.mode == "regression":
        return regression_metrics(preds, labels)
    report = classification_metrics(preds, labels, model.cfg.num_classes)
    return {"mean_f1": report["mean_f1"], "n": report["n"],
            "per_class": report["per_class"]}


def _metric_row(metrics, mode):
    cols = (REGRESSION_METRIC_COLUMNS if mode == "regression"
            else CLASSIFICATION_METRIC_COLUMNS)
    row = []
    for c in cols:
        v = metrics.get(c)
        row.append("" if v is None else v)
    return row


def _score(metrics, mode):
    """Scalar to minimize when selecting the best checkpoint."""
    return metrics["mae"] if mode == "regression" else -metrics["mean_f1"]


def format_metrics(metrics, mode):
    if mode == "regression":
        parts = []
        for key in REGRESSION_METRIC_COLUMNS:
            v = metrics.get(key)
            parts.append(f"{key}=undefined" if v is None else
                         (f"{key}={v}" if key == "n" else f"{key}={v:.4f}"))
        return "  ".join(parts)
    lines = [f"mean_f1={metrics['mean_f1']:.4f}  n={metrics['n']}"]
    for c, vals in sorted(metrics.get("per_class", {}).items()):
        lines.append(f"  class {c}: acc={vals['acc']:.4f} f1={vals['f1']:.4f}")
    return "\n".join(lines)


def run_training(cfg, model_kind="full", log=None):
    """Train, select the best validation checkpoint, and report test metrics.

    Returns a summary dict with the final metrics and artifact paths."""
    samples, dims, maxima, num_classes = load_source(cfg)
    if cfg.mode == "classification":
        cfg = dataclasses.replace(cfg, num_classes=num_classes)
    idx_tr, idx_va, idx_te = split_indices(len(samples), cfg.seed)
    train_s = [samples[i] for i in idx_tr]
    val_s = [samples[i] for i in idx_va]
    test_s = [samples[i] for i in idx_te]
    if not val_s or not test_s:
        raise ConfigError(f"dataset of {len(samples)} samples is too small "
                          "for a 70/10/20 split")

    os.makedirs(cfg.out_dir, exist_ok=True)
    store = nn.ParamStore(np.random.default_rng(np.random.SeedSequence([401, cfg.seed])),
                          dtype=np.float32)
    model = build_model(store, cfg, dims, maxima, kind=model_kind)
    opt = Adam(store, lr=cfg.lr)

    with open(os.path.join(cfg.out_dir, "config.txt"), "w") as fh:
        for key, value in cfg.to_dict().items():
            fh.write(f"{key} = {value}\n")
        fh.write(f"model_kind = {model_kind}\n")

    epoch_seeds = np.random.SeedSequence([353, cfg.seed]).generate_state(cfg.epochs)
    val_batches = D.make_batches(val_s, cfg.batch_size, shuffle=False, maxima=maxima)
    ckpt_path = os.path.join(cfg.out_dir, "best.ckpt")
    best = None
    best_epoch = -1
    step = 0

    losses_path = os.path.join(cfg.out_dir, "losses.csv")
    metrics_path = os.path.join(cfg.out_dir, "metrics.csv")
    with open(losses_path, "w", newline="") as lf, \
            open(metrics_path, "w", newline="") as mf:
        loss_w = csv.writer(lf)
        loss_w.writerow(LOSS_COLUMNS)
        metric_w = csv.writer(mf)
        metric_cols = (REGRESSION_METRIC_COLUMNS if cfg.mode == "regression"
                       else CLASSIFICATION_METRIC_COLUMNS)
        metric_w.writerow(["epoch", "split"] + metric_cols)

        for epoch in range(cfg.epochs):
            batches = D.make_batches(train_s, cfg.batch_size,
                                     seed=int(epoch_seeds[epoch]),
                                     shuffle=True, maxima=maxima)
            for batch in batches:
                store.zero_grads()
                fwd = model.forward(batch)
                objective, terms = model.losses(fwd, batch.labels)
                if not _finite(terms):
                    raise DivergenceError(step, terms)
                ad.backward(objective)
                opt.step()
                loss_w.writerow([step, epoch] + [terms[k] for k in LOSS_COLUMNS[2:]])
                step += 1

            val_metrics = evaluate_model(model, val_batches)
            metric_w.writerow([epoch, "val"] + _metric_row(val_metrics, cfg.mode))
            if log:
                log(f"epoch {epoch}: val {format_metrics(val_metrics, cfg.mode)}")
            score = _score(val_metrics, cfg.mode)
            if best is None or score < best:
                best = score
                best_epoch = epoch
                save_checkpoint(ckpt_path, store, config={
                    "run": cfg.to_dict(), "model_kind": model_kind,
                    "dims": dims, "maxima": maxima, "best_epoch": epoch,
                })

        params, _, _, _ = load_checkpoint(ckpt_path)
        restore_into(store, params)
        test_batches = D.make_batches(test_s, cfg.batch_size, shuffle=False,
                                      maxima=maxima)
        test_metrics = evaluate_model(model, test_batches)
        metric_w.writerow([best_epoch, "test"] + _metric_row(test_metrics, cfg.mode))
    if log:
        log(f"best epoch {best_epoch}: test {format_metrics(test_metrics, cfg.mode)}")

    return {"test": test_metrics, "best_epoch": best_epoch, "steps": step,
            "checkpoint": ckpt_path, "losses_csv": losses_path,
            "metrics_csv": metrics_path, "model": model, "store": store,
            "config": cfg, "splits": (idx_tr, idx_va, idx_te)}


def load_model_from_checkpoint(path):
    """Rebuild the saved model; returns (model, store, cfg, meta)."""
    params, _, _, meta = load_checkpoint(path)
    if not meta or "run" not in meta:
        raise ConfigError(f"checkpoint {path} carries no run configuration")
    cfg = RunConfig(**meta["run"])
    store = nn.ParamStore(np.random.default_rng(0), dtype=np.float32)
    model = build_model(store, cfg, meta["dims"], meta["maxima"],
                        kind=meta.get("model_kind", "full"))
    restore_into(store, params)
    return model, store, cfg, meta


def evaluate_checkpoint(path, split="test", dump_reps=None, dump_attention=None,
                        log=None):
    """Evaluate a saved model on a split of its configured dataset."""
    model, _, cfg, meta = load_model_from_checkpoint(path)
    samples, dims, maxima, _ = load_source(cfg)
    if dims != meta["dims"] or maxima != meta["maxima"]:
        keys = sorted({m for m in dims if dims[m] != meta["dims"].get(m)} |
                      {m for m in maxima if maxima[m] != meta["maxima"].get(m)})
        raise ConfigError(f"dataset geometry does not match checkpoint "
                          f"(keys: {', '.join(keys)})")
    chosen = select_split(samples, split, cfg.seed)
    batches = D.make_batches(chosen, cfg.batch_size, shuffle=False, maxima=maxima)
    metrics = evaluate_model(model, batches)
    if log:
        log(format_metrics(metrics, cfg.mode))
    if dump_reps:
        write_representations(model, batches, dump_reps)
    if dump_attention:
        write_attention(model, batches[0], dump_attention)
    return metrics


def select_split(samples, split, seed):
    if split == "all":
        return samples
    idx_tr, idx_va, idx_te = split_indices(len(samples), seed)
    table = {"train": idx_tr, "val": idx_va, "test": idx_te}
    if split not in table:
        raise ConfigError(f"unknown split {split!r}")
    return [samples[i] for i in table[split]]


# ---------------------------------------------------------------------------
# representation dumps and linear probing

def collect_representations(model, batches):
    """Pooled private/shared vectors for every sample and modality.

    Returns (ids, X_e, X_a, modality_index) with rows ordered sample-major."""
    ids = []
    xe = []
    xa = []
    mods = []
    with ad.no_grad():
        for batch in batches:
            fwd = model.forward(batch)
            he = {m: fwd["he"][m].data for m in ORDER}
            ha = {m: fwd["ha"][m].data for m in ORDER}
            for k, sample_id in enumerate(batch.ids):
                for mi, m in enumerate(ORDER):
                    ids.append(sample_id)
                    xe.append(he[m][k])
                    xa.append(ha[m][k])
                    mods.append(mi)
    return ids, np.asarray(xe), np.asarray(xa), np.asarray(mods)


def write_representations(model, batches, path):
    ids, xe, xa, mods = collect_representations(model, batches)
    d_h = xe.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "modality", "kind"] + [f"v{i}" for i in range(d_h)])
        for row, (sid, mi) in enumerate(zip(ids, mods)):
            w.writerow([sid, ORDER[mi], "exclusive"] + [f"{v:.7g}" for v in xe[row]])
            w.writerow([sid, ORDER[mi], "agnostic"] + [f"{v:.7g}" for v in xa[row]])


def write_attention(model, batch, prefix):
    """Dump attention maps for one batch: self-attention logit maps per layer
    and the cross-modal maps from the last fine-grained units."""
    collect = {}
    with ad.no_grad():
        model.forward(batch, collect=collect)
    written = []
    for layer_idx, by_mod in enumerate(collect.get("psa") or []):
        for m, maps in by_mod.items():
            out = f"{prefix}_psa_l{layer_idx}_{m}.csv"
            _write_map_csv(out, maps, batch.ids)
            written.append(out)
    for target, by_src in (collect.get("hca") or {}).items():
        for src, maps in by_src.items():
            out = f"{prefix}_hca_fine_{target}_from_{src}.csv"
            _write_map_csv(out, maps, batch.ids)
            written.append(out)
    return written


def _write_map_csv(path, maps, ids):
    # maps: (n, heads, T_q, T_k)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "head", "row", "col", "value"])
        for k, sid in enumerate(ids):
            arr = maps[k]
            for h in range(arr.shape[0]):
                for i in range(arr.shape[1]):
                    for j in range(arr.shape[2]):
                        w.writerow([sid, h, i, j, f"{arr[h, i, j]:.7g}"])


def modality_probe(model, fit_batches, eval_batches, seed=0):
    """Fit one linear classifier per representation kind on pooled vectors
    from fit_batches and report modality accuracy on eval_batches."""
    from sklearn.linear_model import LogisticRegression

    _, xe_fit, xa_fit, y_fit = collect_representations(model, fit_batches)
    _, xe_ev, xa_ev, y_ev = collect_representations(model, eval_batches)
    out = {}
    for key, (xf, xv) in {"exclusive": (xe_fit, xe_ev),
                          "agnostic": (xa_fit, xa_ev)}.items():
        clf = LogisticRegression(max_iter=2000, random_state=seed)
        clf.fit(xf, y_fit)
        out[key] = float(clf.score(xv, y_ev))
    return out


# ---------------------------------------------------------------------------
# sweeps

SWEEPABLE = ("mu", "alpha", "beta", "psa_layers", "hca_layers")


def run_sweep(cfg, param, values, out_csv, log=None):
    """One full training per value; all other settings held fixed."""
    if param not in SWEEPABLE:
        raise ConfigError(f"cannot sweep {param!r}; choose one of {SWEEPABLE}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    caster = int if param.endswith("_layers") else float
    rows = []
    for value in values:
        value = caster(value)
        sub = dataclasses.replace(cfg, **{param: value},
                                  out_dir=os.path.join(cfg.out_dir,
                                                       f"sweep_{param}_{value}"))
        if log:
            log(f"sweep {param}={value}")
        summary = run_training(sub, log=log)
        rows.append((value, summary["test"]))
    cols = (REGRESSION_METRIC_COLUMNS if cfg.mode == "regression"
            else CLASSIFICATION_METRIC_COLUMNS)
    with open(out_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["param", "value"] + cols)
        for value, metrics in rows:
            w.writerow([param, value] + _metric_row(metrics, cfg.mode))
    return rows
