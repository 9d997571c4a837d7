"""Run configuration: dataclasses, strict YAML parsing and config hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

from .backbone import PRESETS
from .errors import ConfigError

# YAML/CLI key -> dataclass attribute (lambda is reserved in Python)
_KEY_ALIASES = {"lambda": "lambda_"}
_ATTR_TO_KEY = {v: k for k, v in _KEY_ALIASES.items()}


@dataclass
class TrainConfig:
    """Everything the training loop needs; defaults follow the reference recipe."""

    lambda_: float = 0.1
    alpha: float = 0.3
    msad_tau: float = 0.07
    patchwise: bool = True
    smoothing: bool = True
    input_side: int = 224
    preset: str = "tiny-desk"
    epochs: Optional[int] = None  # resolved per mode: 800 from scratch, 400 continual
    batch_size: int = 32
    global_crops: int = 2
    local_crops: int = 8
    global_crop_scale: tuple[float, float] = (0.4, 1.0)
    local_crop_scale: tuple[float, float] = (0.05, 0.4)
    lr: float = 5e-4
    min_lr: float = 1e-6
    warmup_epochs: int = 10
    weight_decay: float = 0.04
    weight_decay_final: float = 0.4
    clip_grad: float = 3.0
    ema_momentum: float = 0.996
    ema_momentum_final: float = 1.0
    student_temp: float = 0.1
    teacher_temp: float = 0.07
    teacher_temp_start: float = 0.04
    teacher_temp_warmup_epochs: int = 30
    center_momentum: float = 0.9
    dino_out_dim: int = 4096
    dino_hidden_dim: int = 1024
    dino_bottleneck_dim: int = 128
    proj_dim: Optional[int] = None
    seed: int = 0
    sensors: list[str] = field(default_factory=list)
    checkpoint_every: int = 25
    continual_swap_roles: bool = False

    def resolved_epochs(self, mode: str) -> int:
        if self.epochs is not None:
            return self.epochs
        return 800 if mode == "scratch" else 400

    def validation_errors(self) -> list[str]:
        errs = []
        if self.lambda_ < 0:
            errs.append(f"lambda must be >= 0, got {self.lambda_}")
        if not 0.0 <= self.alpha < 1.0:
            errs.append(f"alpha must be in [0, 1), got {self.alpha}")
        if self.msad_tau <= 0:
            errs.append(f"msad_tau must be > 0, got {self.msad_tau}")
        if self.batch_size < 1:
            errs.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.smoothing and self.alpha > 0 and self.batch_size < 2:
            errs.append("batch_size must be >= 2 when label smoothing is enabled")
        if self.preset not in PRESETS:
            errs.append(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        else:
            patch = PRESETS[self.preset].patch_side
            if self.input_side <= 0 or self.input_side % patch != 0:
                errs.append(f"input_side {self.input_side} is not divisible by patch side {patch}")
        if self.epochs is not None and self.epochs < 0:
            errs.append(f"epochs must be >= 0, got {self.epochs}")
        if self.global_crops != 2:
            errs.append(f"global_crops is fixed at 2, got {self.global_crops}")
        if self.local_crops < 0:
            errs.append(f"local_crops must be >= 0, got {self.local_crops}")
        for name, (lo, hi) in (
            ("global_crop_scale", tuple(self.global_crop_scale)),
            ("local_crop_scale", tuple(self.local_crop_scale)),
        ):
            if not (0 < lo <= hi <= 1):
                errs.append(f"{name} must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})")
        if self.lr <= 0:
            errs.append(f"lr must be > 0, got {self.lr}")
        for name in ("student_temp", "teacher_temp", "teacher_temp_start"):
            if getattr(self, name) <= 0:
                errs.append(f"{name} must be > 0, got {getattr(self, name)}")
        for name in ("ema_momentum", "ema_momentum_final", "center_momentum"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                errs.append(f"{name} must be in [0, 1], got {getattr(self, name)}")
        if self.checkpoint_every < 1:
            errs.append(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")
        if len(set(self.sensors)) != len(self.sensors):
            errs.append(f"sensors contains duplicates: {self.sensors}")
        return errs

    def validate(self) -> "TrainConfig":
        errs = self.validation_errors()
        if errs:
            raise ConfigError("invalid training configuration:\n  - " + "\n  - ".join(errs))
        return self


@dataclass
class DataConfig:
    corpus: Optional[str] = None
    labels: str = "labels.json"  # sidecar filename at the corpus root, if present

    def validation_errors(self) -> list[str]:
        return []


@dataclass
class EvalConfig:
    ks: list[int] = field(default_factory=lambda: [5, 10, 20, 50, 100, 200])
    knn_temperature: Optional[float] = None  # None -> uniform vote
    linear_epochs: int = 100
    linear_lr: float = 0.01
    linear_batch: int = 32
    fraction: float = 1.0
    which: str = "teacher"
    bank_split: str = "train"
    query_split: str = "val"
    bank_sensor: Optional[str] = None
    query_sensor: Optional[str] = None
    seed: int = 0

    def validation_errors(self) -> list[str]:
        errs = []
        if not self.ks:
            errs.append("ks must be non-empty")
        if any(k < 1 for k in self.ks):
            errs.append(f"every k must be >= 1, got {self.ks}")
        if self.knn_temperature is not None and self.knn_temperature <= 0:
            errs.append(f"knn_temperature must be > 0, got {self.knn_temperature}")
        if not 0 < self.fraction <= 1:
            errs.append(f"fraction must be in (0, 1], got {self.fraction}")
        if self.which not in ("teacher", "student"):
            errs.append(f"which must be 'teacher' or 'student', got {self.which!r}")
        if self.linear_epochs < 0:
            errs.append(f"linear_epochs must be >= 0, got {self.linear_epochs}")
        return errs


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        errs = [f"train: {e}" for e in self.train.validation_errors()]
        errs += [f"data: {e}" for e in self.data.validation_errors()]
        errs += [f"eval: {e}" for e in self.eval.validation_errors()]
        if errs:
            raise ConfigError("invalid run configuration:\n  - " + "\n  - ".join(errs))
        return self


def _coerce(value: Any, target_type: Any) -> Any:
    # YAML gives lists; some fields want tuples
    if isinstance(value, list) and str(target_type).startswith("tuple"):
        return tuple(value)
    return value


def _dataclass_from_mapping(cls, mapping: Mapping[str, Any], section: str):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    unknown = []
    for key, value in mapping.items():
        attr = _KEY_ALIASES.get(key, key)
        if attr not in known:
            unknown.append(key)
            continue
        kwargs[attr] = _coerce(value, known[attr].type)
    if unknown:
        raise ConfigError(f"unknown keys in section {section!r}: {sorted(unknown)}")
    return cls(**kwargs)


def run_config_from_mapping(mapping: Mapping[str, Any]) -> RunConfig:
    sections = {"train": TrainConfig, "data": DataConfig, "eval": EvalConfig}
    # effective-config files written by runs carry their own hash; skip it
    unknown = [k for k in mapping if k not in sections and k != "config_hash"]
    if unknown:
        raise ConfigError(f"unknown top-level config sections: {sorted(unknown)}")
    parts = {}
    for name, cls in sections.items():
        sub = mapping.get(name, {})
        if sub is None:
            sub = {}
        if not isinstance(sub, Mapping):
            raise ConfigError(f"config section {name!r} must be a mapping")
        parts[name] = _dataclass_from_mapping(cls, sub, name)
    return RunConfig(**parts)


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise ConfigError(f"config file {path} must contain a mapping")
    return run_config_from_mapping(raw)


def _to_plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        out = {}
        for f in fields(obj):
            key = _ATTR_TO_KEY.get(f.name, f.name)
            out[key] = _to_plain(getattr(obj, f.name))
        return out
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    return obj


def run_config_to_mapping(cfg: RunConfig) -> dict:
    return _to_plain(cfg)


def config_hash(cfg: RunConfig | Mapping[str, Any]) -> str:
    """Short stable hash of the effective configuration."""
    mapping = run_config_to_mapping(cfg) if isinstance(cfg, RunConfig) else cfg
    blob = json.dumps(mapping, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def save_run_config(cfg: RunConfig, path: str | Path) -> str:
    """Write the merged effective config next to run outputs; returns its hash."""
    mapping = run_config_to_mapping(cfg)
    digest = config_hash(mapping)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        yaml.safe_dump({"config_hash": digest, **mapping}, fh, sort_keys=False)
    return digest
