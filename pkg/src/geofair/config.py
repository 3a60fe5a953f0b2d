"""Experiment configuration: one JSON file per experiment, with overrides.

Every key is validated before any data is read or any model trained.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .dataset import SynthConfig
from .errors import ConfigError

METHODS = ("baseline", "weighted", "sampled", "focal")
OUT_DIR_ENV = "GEOFAIR_OUT_DIR"

# Keys that only make sense for one method.
METHOD_KEYS = {
    "focal_gamma": "focal",
    "sampling_threshold": "sampled",
    "sampling_bin_width": "sampled",
}


@dataclass(frozen=True)
class AddaSection:
    split_income: float = 600.0
    latent_dim: int = 64
    hidden: int = 256
    dropout_prob: float = 0.0
    adversarial_steps: int = 500
    disc_steps_per_gen_step: int = 1
    adam_beta1: float = 0.5
    source_epochs: int = 10
    finetune_epochs: int = 5
    finetune: bool = True
    topk: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "baseline"
    focal_gamma: float = 2.0
    sampling_threshold: int = 5000
    sampling_bin_width: float | None = None
    batch_size: int = 128
    learning_rate: float = 1e-3
    epochs: int = 10
    seed: int = 0
    bin_width: float = 300.0
    topk: int = 5
    window: int = 10
    hidden_dims: tuple[int, ...] = (256, 256)
    dropout_prob: float = 0.3
    validation_percent: int = 20
    manifest: str = "manifest.csv"
    out_dir: str = ""
    svg: bool = True
    synth: SynthConfig = field(default_factory=SynthConfig)
    adda: AddaSection | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.focal_gamma < 0:
            raise ConfigError("focal_gamma must be >= 0")
        if int(self.sampling_threshold) != self.sampling_threshold or self.sampling_threshold < 1:
            raise ConfigError("sampling_threshold must be a positive integer")
        if self.sampling_bin_width is not None and self.sampling_bin_width <= 0:
            raise ConfigError("sampling_bin_width must be positive")
        for name in ("batch_size", "epochs", "topk", "window"):
            if int(getattr(self, name)) != getattr(self, name) or getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.learning_rate <= 0 or self.bin_width <= 0:
            raise ConfigError("learning_rate and bin_width must be positive")
        if not 0 < self.validation_percent < 100:
            raise ConfigError("validation_percent must lie strictly between 0 and 100")
        if not 0 <= self.dropout_prob < 1:
            raise ConfigError("dropout_prob must lie in [0, 1)")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    @property
    def output_dir(self) -> Path:
        return Path(self.out_dir or os.environ.get(OUT_DIR_ENV) or "geofair-out")

    @property
    def manifest_path(self) -> Path:
        p = Path(self.manifest)
        return p if p.is_absolute() or p.parent != Path(".") else self.output_dir / p

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        d["synth"]["income_range"] = list(self.synth.income_range)
        for key, owner in METHOD_KEYS.items():
            if owner != self.method:
                del d[key]
        return d


def _coerce(section: str, cls, raw: dict) -> Any:
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(unknown)}")
    try:
        return cls(**raw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    method = raw.get("method", "baseline")
    for key, owner in METHOD_KEYS.items():
        if key in raw and method != owner:
            raise ConfigError(f"{key} only applies to method={owner!r}, not {method!r}")
    if "synth" in raw:
        raw["synth"] = _coerce("synth", SynthConfig, raw["synth"] or {})
    if raw.get("adda") is not None:
        raw["adda"] = _coerce("adda", AddaSection, raw["adda"])
    if "hidden_dims" in raw:
        raw["hidden_dims"] = tuple(raw["hidden_dims"])
    return _coerce("config", ExperimentConfig, raw)


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    key, value = text.split("=", 1)
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return key.strip().split("."), parsed


def load_config(path: str | Path | None, overrides: list[str] = ()) -> ExperimentConfig:
    """Read a JSON config (or start from defaults) and apply ``key=value`` overrides.

    Dotted keys address nested sections, e.g. ``synth.seed=7``.
    """
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{p}: top level must be a JSON object")
    for text in overrides:
        keys, value = parse_override(text)
        node = raw
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override inside non-section key {k!r}")
        node[keys[-1]] = value
    return config_from_dict(raw)
