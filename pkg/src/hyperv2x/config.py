"""Dataclass configs and the YAML experiment-config loader.

Every config is a frozen dataclass. ``ExperimentConfig.from_dict`` is strict:
unknown keys and wrongly-typed values raise ``ConfigError`` before any run
starts.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

COMPRESSION_RATES = (0, 2, 4, 8, 32, 64)
OUTPUT_ROOT_ENV = "HYPERV2X_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    region_size_m: float = 32.0
    cell_size_m: float = 0.5
    num_agents: int = 3
    vehicle_count_range: tuple[int, int] = (2, 10)
    agent_fov_deg: float = 360.0
    agent_range_m: float = 12.0
    obs_noise_std: float = 0.05
    # per-scene noise std is drawn from [obs_noise_std, obs_noise_std_max]
    obs_noise_std_max: float | None = 0.35
    num_classes_dynamic: int = 2
    obs_channels: int = 3
    agent_min_separation_m: float = 8.0
    seed: int = 0

    @property
    def grid_size(self) -> int:
        return int(round(self.region_size_m / self.cell_size_m))

    @property
    def num_classes(self) -> int:
        return self.num_classes_dynamic + 1

    def validate(self) -> None:
        if self.cell_size_m <= 0 or self.region_size_m <= 0:
            raise ConfigError("region_size_m and cell_size_m must be positive")
        ratio = self.region_size_m / self.cell_size_m
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError(
                f"region_size_m / cell_size_m = {ratio} is not an integer grid side"
            )
        if self.num_agents < 1:
            raise ConfigError("num_agents must be >= 1")
        lo, hi = self.vehicle_count_range
        if lo < 0 or hi < lo:
            raise ConfigError(f"invalid vehicle_count_range {self.vehicle_count_range}")
        if self.agent_range_m < 0 or not 0 < self.agent_fov_deg <= 360:
            raise ConfigError("agent_range_m must be >= 0 and agent_fov_deg in (0, 360]")
        if self.obs_noise_std < 0:
            raise ConfigError("obs_noise_std must be >= 0")
        if self.obs_noise_std_max is not None and self.obs_noise_std_max < self.obs_noise_std:
            raise ConfigError("obs_noise_std_max must be >= obs_noise_std")
        if self.num_classes_dynamic < 1:
            raise ConfigError("num_classes_dynamic must be >= 1")
        if self.obs_channels < 2:
            raise ConfigError("obs_channels must be >= 2 (occupancy + visibility)")


@dataclass(frozen=True)
class FeatureSpec:
    channels: int = 32
    hidden: tuple[int, ...] = (16, 32)
    kernel_size: int = 3
    refine: bool = True

    def validate(self) -> None:
        if self.channels < 1:
            raise ConfigError("feature channels must be >= 1")
        if self.kernel_size % 2 != 1:
            raise ConfigError("kernel_size must be odd")


@dataclass(frozen=True)
class DecoderConfig:
    hidden: int = 16
    kernel_size: int = 3


@dataclass(frozen=True)
class CompressionConfig:
    rate: int = 0

    def validate(self, channels: int | None = None) -> None:
        if self.rate not in COMPRESSION_RATES:
            raise ConfigError(f"compression rate {self.rate} not in {COMPRESSION_RATES}")
        if channels is not None and self.rate > 0 and channels % self.rate:
            raise ConfigError(f"channels={channels} not divisible by rate {self.rate}")


@dataclass(frozen=True)
class LossWeights:
    lambda_nll: float = 0.1
    lambda_kl: float = 1e-3
    class_weights: tuple[float, ...] | None = None

    def resolved_class_weights(self, num_classes: int) -> tuple[float, ...]:
        if self.class_weights is None:
            return (1.0,) * num_classes
        if len(self.class_weights) != num_classes:
            raise ConfigError(
                f"class_weights has {len(self.class_weights)} entries, expected {num_classes}"
            )
        return tuple(float(w) for w in self.class_weights)

    def validate(self) -> None:
        if self.lambda_nll < 0 or self.lambda_kl < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.class_weights is not None and any(w < 0 for w in self.class_weights):
            raise ConfigError("class weights must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    epochs_pretrain: int = 20
    epochs_finetune: int = 12
    epochs_compress: int = 4
    batch_size: int = 4
    lr: float = 2e-3
    lr_hypernet: float = 5e-4
    # per-rate fine-tuning: already-trained parameters move at this fraction of
    # their learning rate; the new compression bottleneck uses the full rate
    compress_lr_scale: float = 0.1
    adam_betas: tuple[float, float] = (0.9, 0.999)
    k_samples: int = 10
    k_dropout: int = 20
    hyper_hidden: int = 256
    logvar_init: float = -6.0
    noise_std: float = 0.1
    freeze_encoder: bool = False
    seed: int = 0

    def validate(self) -> None:
        for name in ("epochs_pretrain", "epochs_finetune", "epochs_compress"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.batch_size < 1 or self.k_samples < 1 or self.k_dropout < 1:
            raise ConfigError("batch_size and sample counts must be >= 1")
        if self.lr <= 0 or self.lr_hypernet <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0 < self.compress_lr_scale <= 1:
            raise ConfigError("compress_lr_scale must lie in (0, 1]")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 160
    n_test: int = 40
    seed: int = 0


@dataclass(frozen=True)
class MetricConfig:
    n_bins: int = 15
    eval_seed: int = 1234
    n_png_scenes: int = 2

    def validate(self) -> None:
        if self.n_bins < 1:
            raise ConfigError("n_bins must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    data: DataConfig = field(default_factory=DataConfig)
    features: FeatureSpec = field(default_factory=FeatureSpec)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    compression: CompressionConfig = field(default_factory=CompressionConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    output_dir: str = "runs"

    def validate(self) -> None:
        self.scenario.validate()
        self.features.validate()
        self.compression.validate(self.features.channels)
        self.loss.validate()
        self.loss.resolved_class_weights(self.scenario.num_classes)
        self.train.validate()
        self.metrics.validate()

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "ExperimentConfig":
        cfg = _build(cls, raw, "")
        cfg.validate()
        return cfg

    def to_dict(self) -> dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    def replace(self, **sections: Any) -> "ExperimentConfig":
        """Return a copy with nested fields overridden, e.g. ``replace(train={"seed": 3})``."""
        raw = self.to_dict()
        for key, value in sections.items():
            if isinstance(value, dict):
                raw[key] = {**raw[key], **value}
            else:
                raw[key] = value
        return ExperimentConfig.from_dict(raw)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def resolved_output_dir(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        out = Path(self.output_dir)
        if root and not out.is_absolute():
            return Path(root) / out
        return out


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(tp: Any, value: Any, where: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return _build(tp, value, where)
    if origin is typing.Union or (origin is not None and str(origin) == "<class 'types.UnionType'>"):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, where) for v in value)
        if len(value) != len(args):
            raise ConfigError(f"{where}: expected {len(args)} entries, got {len(value)}")
        return tuple(_coerce(a, v, where) for a, v in zip(args, value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _build(cls: type, raw: dict[str, Any], prefix: str) -> Any:
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        where = prefix or "config"
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {
        key: _coerce(hints[key], value, f"{prefix}.{key}" if prefix else key)
        for key, value in raw.items()
    }
    return cls(**kwargs)


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return ExperimentConfig.from_dict(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
