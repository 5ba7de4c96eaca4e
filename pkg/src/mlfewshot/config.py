"""Run configuration: defaults, config-file parsing, and the run id.

Config files are "key = value" lines with '#' comments.  Command-line
flags override file values.  The run id is the SHA-1 of the canonical
(path-free) configuration, so reruns of the same configuration agree.
"""

import hashlib
import json
import math
from dataclasses import dataclass, fields

from .errors import ConfigError
from .lcm import validate_threshold

# key name in files/flags -> (attribute, python type)
_NUMERIC_KEYS = {
    "d_j": ("d_j", int),
    "n_heads": ("n_heads", int),
    "d_c": ("d_c", int),
    "n_d": ("n_d", int),
    "lambda": ("lambda_", float),
    "gamma": ("gamma", float),
    "theta": ("theta", float),
    "lr": ("lr", float),
    "lcm_lr": ("lcm_lr", float),
    "epochs": ("epochs", int),
    "warmup_epochs": ("warmup_epochs", int),
    "lcm_epochs": ("lcm_epochs", int),
    "episodes_per_epoch": ("episodes_per_epoch", int),
    "eval_episodes": ("eval_episodes", int),
    "k_shot": ("k_shot", int),
    "seed": ("seed", int),
    "dropout": ("dropout", float),
    "normalize_embeddings": ("normalize_embeddings", bool),
    "threads": ("threads", int),
}

_PATH_KEYS = {
    "manifest": "manifest",
    "embeddings": "embeddings",
    "splits": "splits",
    "checkpoint": "checkpoint",
    "output": "output",
}


@dataclass
class RunConfig:
    d_j: int = 64
    n_heads: int = 8
    d_c: int = 16
    n_d: int = 8
    lambda_: float = 10.0
    gamma: float = 1.0
    theta: float = 0.65
    lr: float = 0.001
    lcm_lr: float = 0.01
    epochs: int = 30
    warmup_epochs: int = 3
    lcm_epochs: int = 20
    episodes_per_epoch: int = 16
    eval_episodes: int = 50
    k_shot: int = 1
    seed: int = 0
    dropout: float = 0.1
    normalize_embeddings: bool = False
    threads: int = 1
    manifest: str | None = None
    embeddings: str | None = None
    splits: str | None = None
    checkpoint: str | None = None
    output: str | None = None

    def validate(self) -> "RunConfig":
        positive_ints = ["d_j", "n_heads", "d_c", "n_d", "lcm_epochs",
                         "episodes_per_epoch", "eval_episodes", "k_shot", "threads"]
        for name in positive_ints:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ["epochs", "warmup_epochs", "seed"]:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ["lambda_", "lr", "lcm_lr"]:
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ConfigError(f"{name.rstrip('_')} must be positive and finite, got {value}")
        if self.gamma < 0 or not math.isfinite(self.gamma):
            raise ConfigError(f"gamma must be >= 0 and finite, got {self.gamma}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        validate_threshold(self.theta)
        if self.d_j % self.n_heads != 0:
            raise ConfigError(f"n_heads ({self.n_heads}) must divide d_j ({self.d_j})")
        if self.epochs > 0 and self.warmup_epochs >= self.epochs:
            raise ConfigError(
                f"warmup_epochs ({self.warmup_epochs}) must be below epochs ({self.epochs})")
        return self


def _convert(key: str, raw, kind):
    if isinstance(raw, kind) and not (kind is int and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    if kind is bool:
        lowered = text.lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key} expects a boolean, got {raw!r}")
    try:
        if kind is int:
            return int(text)
        value = float(text)
    except ValueError as bad:
        raise ConfigError(f"{key} expects a {kind.__name__}, got {raw!r}") from bad
    if not math.isfinite(value):
        raise ConfigError(f"{key} must be finite, got {raw!r}")
    return value


def parse_config_file(path) -> dict[str, str]:
    """Read "key = value" lines; '#' starts a comment, blank lines skipped."""
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line.rstrip()!r}")
            key, _, value = stripped.partition("=")
            key = key.strip()
            value = value.strip()
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            if key in values:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            if key not in _NUMERIC_KEYS and key not in _PATH_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = value
    return values


def build_config(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then config-file values, then overrides (flags win)."""
    cfg = RunConfig()
    for source in (file_values or {}), (overrides or {}):
        for key, raw in source.items():
            if raw is None:
                continue
            if key in _NUMERIC_KEYS:
                attr, kind = _NUMERIC_KEYS[key]
                setattr(cfg, attr, _convert(key, raw, kind))
            elif key in _PATH_KEYS:
                setattr(cfg, _PATH_KEYS[key], str(raw))
            else:
                raise ConfigError(f"unknown config key {key!r}")
    return cfg.validate()


def canonical_dict(cfg: RunConfig) -> dict:
    """The semantic configuration under its file-key names.  Paths and the
    thread count are excluded: neither changes any computed number, so the
    same run hashes identically across machines and worker counts."""
    out = {}
    for key, (attr, kind) in _NUMERIC_KEYS.items():
        if key == "threads":
            continue
        value = getattr(cfg, attr)
        out[key] = bool(value) if kind is bool else kind(value)
    return out


def run_id(cfg: RunConfig) -> str:
    """SHA-1 of the canonical configuration serialized deterministically."""
    blob = json.dumps(canonical_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha1(blob.encode("utf-8")).hexdigest()


def config_field_names() -> list[str]:
    return [f.name for f in fields(RunConfig)]
