"""Strict JSON experiment configuration."""
from __future__ import annotations

import difflib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .audio_data import DATASETS, FeatureConfig
from .learners import LEARNERS, get_learner
from .models import BACKBONES


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


SYNTHETIC_DEFAULTS = {"num_classes": 10, "train_per_class": 30, "test_per_class": 20}


@dataclass
class ExperimentConfig:
    dataset: str
    model_name: str
    init_cls: int
    increment: int
    manifest_path: str | None = None
    memory_size: int = 2000
    convnet_type: str = "tiny-cnn"
    feature_dim: int = 64
    seed: int = 1993
    isfew_shot: bool = False
    kshot: int = 5
    epochs: int = 10
    learning_rate: float = 1e-3
    batch_size: int = 32
    features: dict = field(default_factory=lambda: asdict(FeatureConfig()))
    synthetic: dict = field(default_factory=lambda: dict(SYNTHETIC_DEFAULTS))
    hyperparameters: dict = field(default_factory=dict)
    output_dir: str | None = None

    @property
    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(**self.features)

    def to_dict(self) -> dict:
        return asdict(self)


REQUIRED = ("dataset", "model_name", "init_cls", "increment")
_TYPES = {
    "dataset": str, "model_name": str, "init_cls": int, "increment": int,
    "manifest_path": (str, type(None)), "memory_size": int, "convnet_type": str,
    "feature_dim": int, "seed": int, "isfew_shot": bool, "kshot": int, "epochs": int,
    "learning_rate": float, "batch_size": int, "features": dict, "synthetic": dict,
    "hyperparameters": dict, "output_dir": (str, type(None)),
}
_POSITIVE = ("init_cls", "increment", "feature_dim", "kshot", "batch_size")


def _unknown(key: str, allowed, where: str = "") -> ConfigError:
    hint = difflib.get_close_matches(key.replace("-", "_"), list(allowed), n=1, cutoff=0.6)
    if hint:
        suggestion = f"; did you mean {hint[0]!r}?"
    else:
        suggestion = f"; accepted: {sorted(allowed)}"
    return ConfigError(f"{where}{key}", f"unknown key{suggestion}")


def _check_type(key: str, value, expected) -> None:
    types = expected if isinstance(expected, tuple) else (expected,)
    if isinstance(value, bool) and bool not in types:
        raise ConfigError(key, f"expected {_type_name(types)}, got bool")
    if float in types and isinstance(value, int) and not isinstance(value, bool):
        return
    if not isinstance(value, types):
        raise ConfigError(key, f"expected {_type_name(types)}, got {type(value).__name__}")


def _type_name(types) -> str:
    return " or ".join("null" if t is type(None) else t.__name__ for t in types)


def _check_nested(name: str, doc: dict, defaults: dict) -> dict:
    out = dict(defaults)
    for k, v in doc.items():
        if k not in defaults:
            raise _unknown(k, defaults, f"{name}.")
        _check_type(f"{name}.{k}", v, type(defaults[k]))
        if not v > 0:
            raise ConfigError(f"{name}.{k}", f"must be positive, got {v!r}")
        out[k] = v
    return out


def parse_config(source) -> ExperimentConfig:
    """Parse a config from a dict, a JSON string, or a path to a JSON file."""
    if isinstance(source, dict):
        doc = source
    else:
        text = str(source)
        if not text.lstrip().startswith("{"):
            text = Path(source).read_text(encoding="utf-8")
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("<document>", f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("<document>", "config must be a JSON object")

    names = [f.name for f in fields(ExperimentConfig)]
    for key in doc:
        if key not in names:
            raise _unknown(key, names)
    for key in REQUIRED:
        if key not in doc:
            raise ConfigError(key, "required key missing")
    for key, value in doc.items():
        _check_type(key, value, _TYPES[key])

    for key in _POSITIVE:
        if key in doc and doc[key] < 1:
            raise ConfigError(key, f"must be positive, got {doc[key]}")
    for key in ("memory_size", "epochs"):
        if key in doc and doc[key] < 0:
            raise ConfigError(key, f"must be non-negative, got {doc[key]}")
    if "learning_rate" in doc and doc["learning_rate"] <= 0:
        raise ConfigError("learning_rate", "must be positive")
    if doc["dataset"] not in DATASETS:
        raise ConfigError("dataset", f"unknown dataset {doc['dataset']!r}; registered: {sorted(DATASETS)}")
    if doc.get("convnet_type", "tiny-cnn") not in BACKBONES:
        raise ConfigError("convnet_type", f"unknown backbone; registered: {sorted(BACKBONES)}")
    try:
        learner_cls = get_learner(doc["model_name"])
    except ValueError as exc:
        raise ConfigError("model_name", str(exc)) from None

    cfg = ExperimentConfig(**{k: v for k, v in doc.items()
                              if k not in ("features", "synthetic", "hyperparameters")})
    cfg.features = _check_nested("features", doc.get("features", {}), asdict(FeatureConfig()))
    cfg.synthetic = _check_nested("synthetic", doc.get("synthetic", {}), SYNTHETIC_DEFAULTS)
    if isinstance(cfg.learning_rate, int):
        cfg.learning_rate = float(cfg.learning_rate)

    hp = doc.get("hyperparameters", {})
    for k, v in hp.items():
        if k not in learner_cls.defaults:
            raise _unknown(k, learner_cls.defaults, "hyperparameters.")
        _check_type(f"hyperparameters.{k}", v, type(learner_cls.defaults[k]))
    cfg.hyperparameters = dict(hp)

    if learner_cls.requires_buffer and cfg.memory_size == 0:
        raise ConfigError("memory_size", f"{cfg.model_name} requires memory_size > 0")
    return cfg


def list_models() -> list[str]:
    return sorted(LEARNERS)
