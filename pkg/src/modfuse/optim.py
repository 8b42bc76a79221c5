"""Adam optimizer and the binary checkpoint container.

Checkpoint layout (all integers little-endian):

    bytes 0..7    magic b"MFCP0001"
    bytes 8..11   uint32 header length H
    bytes 12..12+H  UTF-8 JSON header with sorted keys:
                    {"config": {...}|null, "step": int, "tensors": [...]}
                    each tensor record: {"kind": "param"|"adam_m"|"adam_v",
                    "name": str, "offset": int, "shape": [...]}
    remainder     concatenated float32 C-order payloads at the given offsets

Records are sorted by (kind, name), so identical state always serializes to
identical bytes.
"""

from __future__ import annotations

import json
import warnings

import numpy as np

from .errors import DataError

MAGIC = b"MFCP0001"
_KIND_ORDER = {"param": 0, "adam_m": 1, "adam_v": 2}


class Adam:
    """Bias-corrected Adam; epsilon is added outside the square root."""

    def __init__(self, store, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.state = {}
        self.skip_counts = {}

    def _moments(self, name, p):
        if name not in self.state:
            self.state[name] = (np.zeros_like(p.data), np.zeros_like(p.data))
        return self.state[name]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.store.items():
            g = p.grad
            if g is None:
                n = self.skip_counts.get(name, 0)
                if n == 0:
                    warnings.warn(f"parameter {name} has no gradient; skipped")
                self.skip_counts[name] = n + 1
                continue
            m, v = self._moments(name, p)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        self.store.zero_grads()


def save_checkpoint(path, store, optimizer=None, config=None):
    records = []
    arrays = []
    for name, p in store.items():
        records.append(("param", name, p.data))
    if optimizer is not None:
        for name, (m, v) in optimizer.state.items():
            records.append(("adam_m", name, m))
            records.append(("adam_v", name, v))
    records.sort(key=lambda r: (_KIND_ORDER[r[0]], r[1]))

    offset = 0
    tensor_meta = []
    for kind, name, arr in records:
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        tensor_meta.append({"kind": kind, "name": name, "offset": offset,
                            "shape": list(arr.shape)})
        arrays.append(arr32)
        offset += arr32.nbytes

    header = {
        "config": config,
        "step": optimizer.t if optimizer is not None else 0,
        "tensors": tensor_meta,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint32(len(blob)).tobytes())
        f.write(blob)
        for arr in arrays:
            f.write(arr.tobytes())


def load_checkpoint(path):
    """Returns (params: name->array, moments: name->(m, v), step, config)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != MAGIC:
        raise DataError(f"not a checkpoint file: {path}")
    hlen = int(np.frombuffer(raw[8:12], dtype="<u4")[0])
    try:
        header = json.loads(raw[12:12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"corrupt checkpoint header: {e}") from None
    payload = raw[12 + hlen:]

    params = {}
    half = {}
    for rec in header["tensors"]:
        shape = tuple(rec["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = rec["offset"]
        end = start + 4 * count
        if end > len(payload):
            raise DataError(f"checkpoint payload truncated at tensor {rec['name']}")
        arr = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape).copy()
        if rec["kind"] == "param":
            params[rec["name"]] = arr
        else:
            half.setdefault(rec["name"], {})[rec["kind"]] = arr
    moments = {}
    for name, mv in half.items():
        if set(mv) != {"adam_m", "adam_v"}:
            raise DataError(f"incomplete optimizer state for {name}")
        moments[name] = (mv["adam_m"], mv["adam_v"])
    return params, moments, header["step"], header["config"]


def restore_into(store, params, optimizer=None, moments=None, step=0):
    """Copy loaded arrays into live tensors; mismatches are reported by name."""
    missing = [n for n, _ in store.items() if n not in params]
    extra = [n for n in params if n not in store]
    if missing or extra:
        raise DataError(f"parameter set mismatch; missing={missing} extra={extra}")
    bad = [n for n, p in store.items() if tuple(p.data.shape) != tuple(params[n].shape)]
    if bad:
        raise DataError(f"parameter shape mismatch for: {bad}")
    for name, p in store.items():
        p.data = params[name].astype(store.dtype, copy=True)
    if optimizer is not None and moments is not None:
        optimizer.state = {k: (m.copy(), v.copy()) for k, (m, v) in moments.items()}
        optimizer.t = step
