"""Asynchronous multimodal samples: synthetic generation, storage, batching.

A sample holds three differently-sampled sequences (language, visual, audio)
plus a regression score in [-3, 3] or a class index. The synthetic generator
plants one latent z in all three modalities through modality-specific
mechanisms, so the label is recoverable best by fusing them:

  language  a fixed unit keyword direction scaled by z, inserted at one
            random timestep;
  visual    channel 0 carries (z/3) * cos(omega * (t - lag)) starting after
            a random lag of 3..8 frames, omega = 2*pi/8;
  audio     channel 0 is shifted by z/3 over one random window of
            10..15 frames.

Gaussian noise of scale sigma is added everywhere afterwards. Features are
float32 from the moment of creation so disk round-trips are bit-exact.

On disk a dataset is a JSON-lines manifest (header line, then one record per
sample with byte offsets) plus a raw little-endian float32 payload holding
each sample's three matrices in L, V, A order.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os

import numpy as np

from .errors import DataError

MODALITIES = ("L", "V", "A")
MODALITY_ONEHOT = {"L": np.array([1.0, 0.0, 0.0]),
                   "V": np.array([0.0, 1.0, 0.0]),
                   "A": np.array([0.0, 0.0, 1.0])}
VISUAL_OMEGA = 2.0 * math.pi / 8.0
NUM_CLASSES = 7


@dataclasses.dataclass
class GeneratorSpec:
    d_L: int = 12
    d_V: int = 8
    d_A: int = 10
    len_L: tuple = (15, 20)
    len_V: tuple = (28, 35)
    len_A: tuple = (40, 50)
    sigma: float = 0.3
    lag_range: tuple = (3, 8)
    window_range: tuple = (10, 15)
    mode: str = "regression"
    # weight of three per-modality latents that shift the label and appear
    # each in one stream only; 0 disables them and leaves the random stream
    # byte-identical to the original recipe
    private_weight: float = 0.0


@dataclasses.dataclass
class MultimodalSample:
    id: str
    X_L: np.ndarray
    X_V: np.ndarray
    X_A: np.ndarray
    label: float

    def seq(self, m):
        return getattr(self, f"X_{m}")


def keyword_direction(d):
    """The planted language direction: the normalized all-ones vector."""
    return np.ones(d, dtype=np.float64) / math.sqrt(d)


def private_direction(d):
    """Carrier for the language-private signal; orthogonal to the keyword
    direction for even d."""
    v = np.ones(d, dtype=np.float64)
    v[1::2] = -1.0
    return v / math.sqrt(d)


def generate_synthetic(n, seed, spec=None):
    if n <= 0:
        raise DataError(f"sample count must be positive, got {n}")
    spec = spec or GeneratorSpec()
    if spec.private_weight != 0.0 and (spec.d_V < 2 or spec.d_A < 2):
        raise DataError("private signals need at least 2 channels in V and A")
    rng = np.random.default_rng(np.random.SeedSequence([929, seed]))
    k_L = keyword_direction(spec.d_L)
    samples = []
    for idx in range(n):
        z = float(rng.uniform(-3.0, 3.0))
        T_L = int(rng.integers(spec.len_L[0], spec.len_L[1] + 1))
        T_V = int(rng.integers(spec.len_V[0], spec.len_V[1] + 1))
        T_A = int(rng.integers(spec.len_A[0], spec.len_A[1] + 1))

        X_L = np.zeros((T_L, spec.d_L))
        X_L[int(rng.integers(0, T_L))] = k_L * z

        X_V = np.zeros((T_V, spec.d_V))
        lag = int(rng.integers(spec.lag_range[0], spec.lag_range[1] + 1))
        t = np.arange(lag, T_V)
        X_V[t, 0] = (z / 3.0) * np.cos(VISUAL_OMEGA * (t - lag))

        X_A = np.zeros((T_A, spec.d_A))
        w = int(rng.integers(spec.window_range[0], spec.window_range[1] + 1))
        w = min(w, T_A)
        start = int(rng.integers(0, T_A - w + 1))
        X_A[start:start + w, 0] += z / 3.0

        priv = 0.0
        if spec.private_weight != 0.0:
            zp = rng.uniform(-1.0, 1.0, 3)
            X_L[int(rng.integers(0, T_L))] += private_direction(spec.d_L) * zp[0]
            X_V[:, 1] += zp[1] * np.sin(VISUAL_OMEGA * np.arange(T_V))
            w2 = min(int(rng.integers(spec.window_range[0],
                                      spec.window_range[1] + 1)), T_A)
            s2 = int(rng.integers(0, T_A - w2 + 1))
            X_A[s2:s2 + w2, 1] += zp[2]
            priv = spec.private_weight * float(zp.sum())

        if spec.sigma > 0:
            X_L += rng.normal(0.0, spec.sigma, X_L.shape)
            X_V += rng.normal(0.0, spec.sigma, X_V.shape)
            X_A += rng.normal(0.0, spec.sigma, X_A.shape)

        score = min(3.0, max(-3.0, z + priv))
        if spec.mode == "classification":
            rounded = math.floor(score + 0.5) if score >= 0 else math.ceil(score - 0.5)
            label = float(min(6, max(0, rounded + 3)))
        else:
            label = score
        samples.append(MultimodalSample(
            id=f"syn-{seed}-{idx:05d}",
            X_L=X_L.astype(np.float32),
            X_V=X_V.astype(np.float32),
            X_A=X_A.astype(np.float32),
            label=label,
        ))
    return samples


def dataset_dims(samples):
    s = samples[0]
    return {m: s.seq(m).shape[1] for m in MODALITIES}


def dataset_maxima(samples):
    return {m: max(s.seq(m).shape[0] for s in samples) for m in MODALITIES}


# ---------------------------------------------------------------------------
# disk format

def save_dataset(samples, manifest_path, mode="regression", split="all",
                 num_classes=NUM_CLASSES):
    if not samples:
        raise DataError("refusing to save an empty dataset")
    payload_path = os.path.splitext(manifest_path)[0] + ".bin"
    dims = dataset_dims(samples)
    maxima = dataset_maxima(samples)
    header = {
        "format": "modfuse-dataset-v1",
        "mode": mode,
        "dims": dims,
        "maxima": maxima,
        "split": split,
        "count": len(samples),
        "payload": os.path.basename(payload_path),
    }
    if mode == "classification":
        header["num_classes"] = num_classes
    offset = 0
    lines = [json.dumps(header, sort_keys=True)]
    with open(payload_path, "wb") as pf:
        for s in samples:
            rec = {"id": s.id, "label": s.label, "offset": offset,
                   "lengths": {m: int(s.seq(m).shape[0]) for m in MODALITIES}}
            for m in MODALITIES:
                arr = np.ascontiguousarray(s.seq(m), dtype="<f4")
                pf.write(arr.tobytes())
                offset += arr.nbytes
            lines.append(json.dumps(rec, sort_keys=True))
    with open(manifest_path, "w") as mf:
        mf.write("\n".join(lines) + "\n")
    return manifest_path, payload_path


def load_dataset(manifest_path):
    with open(manifest_path) as mf:
        lines = [ln for ln in mf.read().splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"empty manifest: {manifest_path}")
    try:
        header = json.loads(lines[0])
        records = [json.loads(ln) for ln in lines[1:]]
    except json.JSONDecodeError as e:
        raise DataError(f"malformed manifest line: {e}") from None
    if header.get("format") != "modfuse-dataset-v1":
        raise DataError(f"unrecognized manifest header in {manifest_path}")
    mode = header["mode"]
    dims = header["dims"]
    maxima = header["maxima"]
    num_classes = header.get("num_classes", NUM_CLASSES)

    payload_path = os.path.join(os.path.dirname(os.path.abspath(manifest_path)),
                                header["payload"])
    with open(payload_path, "rb") as pf:
        payload = pf.read()

    spans = []
    for rec in records:
        nbytes = 4 * sum(rec["lengths"][m] * dims[m] for m in MODALITIES)
        spans.append((rec["offset"], rec["offset"] + nbytes, rec["id"]))
    spans.sort()
    for (s1, e1, id1), (s2, e2, id2) in zip(spans, spans[1:]):
        if s2 < e1:
            raise DataError(f"overlapping payload offsets for records {id1} and {id2}")

    samples = []
    for rec in records:
        lengths = rec["lengths"]
        for m in MODALITIES:
            if lengths[m] > maxima[m]:
                raise DataError(f"record {rec['id']}: length {lengths[m]} exceeds "
                                f"manifest maximum {maxima[m]} for modality {m}")
        label = rec["label"]
        if mode == "regression":
            if not (-3.0 <= label <= 3.0):
                raise DataError(f"record {rec['id']}: regression label {label} "
                                f"outside [-3, 3]")
        else:
            if label != int(label) or not (0 <= int(label) < num_classes):
                raise DataError(f"record {rec['id']}: class label {label} "
                                f"outside 0..{num_classes - 1}")
        offset = rec["offset"]
        mats = {}
        for m in MODALITIES:
            count = lengths[m] * dims[m]
            end = offset + 4 * count
            if end > len(payload):
                raise DataError(f"record {rec['id']}: payload truncated "
                                f"(needs bytes up to {end}, file has {len(payload)})")
            mats[m] = np.frombuffer(payload[offset:end], dtype="<f4") \
                .reshape(lengths[m], dims[m]).copy()
            offset = end
        samples.append(MultimodalSample(id=rec["id"], X_L=mats["L"], X_V=mats["V"],
                                        X_A=mats["A"], label=label))
    return samples, header


# ---------------------------------------------------------------------------
# batching

@dataclasses.dataclass
class Batch:
    x: dict          # modality -> (n, T_max_m, d_m) float32, zero padded
    mask: dict       # modality -> (n, T_max_m) float32, 1 = valid
    labels: np.ndarray
    ids: list

    @property
    def size(self):
        return len(self.ids)


def pad_samples(samples, maxima, dtype=np.float32):
    n = len(samples)
    x = {}
    mask = {}
    for m in MODALITIES:
        d = samples[0].seq(m).shape[1]
        xm = np.zeros((n, maxima[m], d), dtype=dtype)
        mm = np.zeros((n, maxima[m]), dtype=dtype)
        for i, s in enumerate(samples):
            T = s.seq(m).shape[0]
            xm[i, :T] = s.seq(m)
            mm[i, :T] = 1.0
        x[m] = xm
        mask[m] = mm
    return x, mask


def make_batches(samples, batch_size, seed=0, shuffle=True, maxima=None,
                 dtype=np.float32):
    if not samples:
        raise DataError("cannot batch an empty sample list")
    if batch_size < 2:
        raise DataError(f"batch size must be at least 2, got {batch_size}")
    maxima = maxima or dataset_maxima(samples)
    order = list(range(len(samples)))
    if shuffle:
        np.random.default_rng(np.random.SeedSequence([617, seed])).shuffle(order)
    batches = []
    for i in range(0, len(order), batch_size):
        chunk = [samples[j] for j in order[i:i + batch_size]]
        x, mask = pad_samples(chunk, maxima, dtype=dtype)
        labels = np.asarray([s.label for s in chunk], dtype=dtype)
        batches.append(Batch(x=x, mask=mask, labels=labels, ids=[s.id for s in chunk]))
    return batches
