"""Training configuration: defaults, JSON round-trip, env overrides.

Unknown JSON keys are hard errors so hyperparameter typos cannot pass
silently; keys starting with "_" are comments and are stripped at parse.
Environment variables prefixed PROTOSHIFT_ override config fields, with
"__" separating nesting levels (e.g. PROTOSHIFT_LOSS_WEIGHTS__FCL=0.2).
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields

from .contrastive import LossWeights
from .core import ConfigError
from .pseudo import StaticLabelConfig
from .synthdata import DomainShift, SceneSpec, benchmark_shift

ENV_PREFIX = "PROTOSHIFT_"

#: Where each default comes from: values lifted from the reference training
#: protocol (scaled to desk size) vs. values this implementation chose.
REFERENCE_PROTOCOL = "reference protocol (scaled)"
IMPLEMENTATION_DEFAULT = "implementation default"

PROVENANCE = {
    "iterations": REFERENCE_PROTOCOL,  # 100k at full scale, scaled down
    "batch_size": REFERENCE_PROTOCOL,  # 4
    "lr0": IMPLEMENTATION_DEFAULT,  # full-scale value targets a pretrained backbone
    "momentum": REFERENCE_PROTOCOL,  # 0.9
    "weight_decay": REFERENCE_PROTOCOL,  # 5e-4
    "poly_exponent": REFERENCE_PROTOCOL,  # 0.9
    "ema_momentum": IMPLEMENTATION_DEFAULT,
    "similarity_threshold": IMPLEMENTATION_DEFAULT,
    "loss_weights": IMPLEMENTATION_DEFAULT,  # balance factors live in the supplement
    "static_labels.fraction": IMPLEMENTATION_DEFAULT,
    "static_labels.refresh_interval": REFERENCE_PROTOCOL,  # every 10% of training
    "ablation": IMPLEMENTATION_DEFAULT,
    "seed": IMPLEMENTATION_DEFAULT,
    "eval_interval": IMPLEMENTATION_DEFAULT,
    "encoder_widths": IMPLEMENTATION_DEFAULT,
    "encoder_stride": IMPLEMENTATION_DEFAULT,
    "scene": IMPLEMENTATION_DEFAULT,
    "shift": IMPLEMENTATION_DEFAULT,
    "data": IMPLEMENTATION_DEFAULT,
    "augment": REFERENCE_PROTOCOL,  # horizontal flip + scale jitter [0.8, 1.2]
    "oversample_rare": REFERENCE_PROTOCOL,  # approximates weighted rare-class sampling
    "seg_target_labels": IMPLEMENTATION_DEFAULT,
    "prototype_pooling": IMPLEMENTATION_DEFAULT,
    "contrastive_all_classes": IMPLEMENTATION_DEFAULT,
    "metrics_pixels": IMPLEMENTATION_DEFAULT,
    "target_warmup_fraction": IMPLEMENTATION_DEFAULT,  # stands in for source pretraining
}


@dataclass(frozen=True)
class AblationSwitches:
    use_fcl: bool = True
    use_bcl: bool = True
    use_dynamic: bool = True
    use_calibration: bool = True


@dataclass(frozen=True)
class DataConfig:
    n_source: int = 40
    n_target: int = 40
    n_eval: int = 16

    def __post_init__(self):
        if self.n_source < 1 or self.n_target < 1 or self.n_eval < 0:
            raise ConfigError("dataset sizes must be positive")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 1200
    batch_size: int = 4
    lr0: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    poly_exponent: float = 0.9
    ema_momentum: float = 0.9
    similarity_threshold: float = 0.98
    loss_weights: LossWeights = field(default_factory=LossWeights)
    static_labels: StaticLabelConfig = field(default_factory=StaticLabelConfig)
    ablation: AblationSwitches = field(default_factory=AblationSwitches)
    seed: int = 0
    eval_interval: int = 100
    encoder_widths: tuple = (8, 16, 16)
    encoder_stride: int = 1
    scene: SceneSpec = field(default_factory=SceneSpec)
    shift: DomainShift = field(default_factory=benchmark_shift)
    data: DataConfig = field(default_factory=DataConfig)
    augment: bool = True
    oversample_rare: bool = True
    seg_target_labels: str = "hybrid"
    prototype_pooling: str = "batch"
    contrastive_all_classes: bool = False
    metrics_pixels: int = 192
    # source-only fraction of the schedule standing in for the source-pretrained
    # initial model of the full-scale protocol; all target-side terms are off
    # until it ends and the static store is refreshed at that point
    target_warmup_fraction: float = 0.3

    def __post_init__(self):
        if not (0.0 <= self.target_warmup_fraction < 1.0):
            raise ConfigError("target_warmup_fraction must be in [0, 1)")
        if self.iterations < 1 or self.batch_size < 1:
            raise ConfigError("iterations and batch_size must be positive")
        if self.lr0 < 0 or not (0 <= self.momentum < 1) or self.weight_decay < 0:
            raise ConfigError("invalid optimizer settings")
        if not (0 <= self.ema_momentum <= 1):
            raise ConfigError("ema_momentum must be in [0, 1]")
        if not (-1 < self.similarity_threshold < 1):
            raise ConfigError("similarity_threshold must be in (-1, 1)")
        if self.seg_target_labels not in ("hybrid", "static"):
            raise ConfigError("seg_target_labels must be 'hybrid' or 'static'")
        if self.prototype_pooling not in ("batch", "per_image"):
            raise ConfigError("prototype_pooling must be 'batch' or 'per_image'")
        if self.encoder_stride not in (1, 2):
            raise ConfigError("encoder_stride must be 1 or 2")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be >= 1")


_NESTED = {
    "loss_weights": LossWeights,
    "static_labels": StaticLabelConfig,
    "ablation": AblationSwitches,
    "scene": SceneSpec,
    "shift": DomainShift,
    "data": DataConfig,
}


def _to_jsonable(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _to_jsonable(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, tuple):
        return [_to_jsonable(v) for v in value]
    return value


def config_to_dict(cfg: TrainConfig) -> dict:
    return _to_jsonable(cfg)


def config_to_json(cfg: TrainConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True)


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _build(cls, data: dict, path: str):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key.startswith("_"):
            continue  # comment key
        if key not in known:
            raise ConfigError(f"unknown config key: {path}{key}")
        sub = _NESTED.get(key) if cls is TrainConfig else None
        if sub is not None:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path}{key} must be an object")
            kwargs[key] = _build(sub, value, f"{path}{key}.")
        else:
            kwargs[key] = _tuplify(value)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid config near {path or 'top level'}: {exc}") from exc


def config_from_dict(data: dict) -> TrainConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    return _build(TrainConfig, data, "")


def apply_env_overrides(data: dict, environ=None) -> dict:
    """Fold PROTOSHIFT_* variables into a raw config dict ("__" nests)."""
    environ = os.environ if environ is None else environ
    out = json.loads(json.dumps(data))  # deep copy
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        parts = name[len(ENV_PREFIX):].lower().split("__")
        if parts == ["kernels"]:  # backend selector, not a config field
            continue
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"env override {name} conflicts with scalar field")
        node[parts[-1]] = value
    return out


def load_config(path: str, environ=None) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    return config_from_dict(apply_env_overrides(data, environ))


def default_config(**overrides) -> TrainConfig:
    return dataclasses.replace(TrainConfig(), **overrides)
