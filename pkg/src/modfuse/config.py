"""Run configuration: defaults, a flat key-value config file format, and
dotted command-line overrides.

A config file holds one `key = value` pair per line, with `#` comments.
Override strings use the same `key=value` shape. Keys may be the flat field
name (`mu`) or a dotted alias (`psa.mu`); unknown keys are rejected rather
than ignored so typos fail loudly.
"""

from __future__ import annotations

import dataclasses

from .errors import ConfigError


@dataclasses.dataclass
class RunConfig:
    # data
    data: str = "synthetic"          # "synthetic" or a manifest path
    mode: str = "regression"
    n_samples: int = 2000
    num_classes: int = 7
    # architecture
    d: int = 40
    d_h: int = 64
    heads: int = 8
    kernel_l: int = 3
    kernel_v: int = 3
    kernel_a: int = 3
    psa_layers: int = 3
    hca_layers: int = 2
    mu: float = 0.25
    pooling: str = "mean"
    dgf_self_loops: bool = True
    # optimization
    batch_size: int = 32
    epochs: int = 60
    lr: float = 1e-3
    alpha: float = 0.02
    beta: float = 0.03
    seed: int = 0
    out_dir: str = "runs/run"
    # ablation flags, all off by default
    disable_psa: bool = False
    disable_prediction_chain: bool = False
    disable_wal: bool = False
    disable_hca: bool = False
    disable_mru_mixed: bool = False
    disable_mru_coarse: bool = False
    disable_mru_fine: bool = False
    disable_dgf: bool = False
    use_sep_loss: bool = False
    use_only_exclusive: bool = False
    use_only_agnostic: bool = False
    no_omega: bool = False
    use_feature_addition: bool = False
    use_feature_multiplication: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.mode not in ("regression", "classification"):
            raise ConfigError(f"mode must be regression or classification, got {self.mode!r}")
        if self.pooling not in ("mean", "last"):
            raise ConfigError(f"pooling must be mean or last, got {self.pooling!r}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.n_samples < 10:
            raise ConfigError(f"n_samples must be >= 10, got {self.n_samples}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.d <= 0 or self.d % 2 != 0:
            raise ConfigError(f"d must be a positive even number, got {self.d}")
        if self.d_h <= 0:
            raise ConfigError(f"d_h must be positive, got {self.d_h}")
        if self.heads < 1 or self.d % self.heads != 0:
            raise ConfigError(f"d={self.d} must be divisible by heads={self.heads}")
        for key in ("kernel_l", "kernel_v", "kernel_a"):
            k = getattr(self, key)
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"{key} must be a positive odd number, got {k}")
        if self.psa_layers < 1 or self.hca_layers < 1:
            raise ConfigError("psa_layers and hca_layers must be >= 1")
        if not (0.0 <= self.mu <= 1.0):
            raise ConfigError(f"mu must lie in [0, 1], got {self.mu}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError(f"alpha and beta must be nonnegative, got "
                              f"alpha={self.alpha} beta={self.beta}")
        if self.seed < 0:
            raise ConfigError(f"seed must be nonnegative, got {self.seed}")
        if self.use_only_exclusive and self.use_only_agnostic:
            raise ConfigError("use_only_exclusive and use_only_agnostic are mutually exclusive")
        variants = [self.disable_dgf, self.use_feature_addition,
                    self.use_feature_multiplication]
        if sum(variants) > 1:
            raise ConfigError("at most one of disable_dgf, use_feature_addition, "
                              "use_feature_multiplication may be set")
        if all((self.disable_mru_mixed, self.disable_mru_coarse,
                self.disable_mru_fine)) and not self.disable_hca:
            raise ConfigError("all three reinforcement granularities are disabled; "
                              "set disable_hca instead")

    def kernels(self):
        return {"L": self.kernel_l, "V": self.kernel_v, "A": self.kernel_a}

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values):
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - fields)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**values)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}

# dotted spellings accepted on the command line and in config files
_ALIASES = {
    "data.source": "data",
    "data.mode": "mode",
    "data.n_samples": "n_samples",
    "data.num_classes": "num_classes",
    "model.d": "d",
    "model.d_h": "d_h",
    "model.pooling": "pooling",
    "psa.mu": "mu",
    "psa.layers": "psa_layers",
    "psa.heads": "heads",
    "hca.layers": "hca_layers",
    "fusion.self_loops": "dgf_self_loops",
    "loss.alpha": "alpha",
    "loss.beta": "beta",
    "train.batch_size": "batch_size",
    "train.epochs": "epochs",
    "train.lr": "lr",
    "train.seed": "seed",
    "train.out_dir": "out_dir",
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _resolve_key(key):
    if key in _ALIASES:
        return _ALIASES[key]
    flat = key.replace(".", "_")
    if flat in _FIELD_TYPES:
        return flat
    raise ConfigError(f"unknown config key: {key!r}")


def _coerce(key, raw):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind in (bool, "bool"):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {kind} for key {key!r}") from None


def parse_config_file(path):
    """Read `key = value` lines into a {field: value} dict."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key = value, got {line.rstrip()!r}")
            key, raw = stripped.split("=", 1)
            field = _resolve_key(key.strip())
            values[field] = _coerce(field, raw)
    return values


def parse_overrides(pairs):
    """Parse command-line `key=value` strings into a {field: value} dict."""
    values = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override must look like key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        field = _resolve_key(key.strip())
        values[field] = _coerce(field, raw)
    return values


def load_config(path=None, overrides=()):
    values = {}
    if path is not None:
        values.update(parse_config_file(path))
    values.update(parse_overrides(overrides))
    return RunConfig(**values)
