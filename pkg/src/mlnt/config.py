"""Experiment configuration: a strict YAML schema with desk-scale defaults.

Minimal config::

    seed: 0
    data:
      benchmark: {generator: gaussian_blobs}

Every other key has a default. Unknown keys are rejected and the error names
the offending key path (``hyper.n_synthetics``, ``noise.kind`` ...).
"""
from __future__ import annotations

import math
import os
from pathlib import Path
from typing import Any, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .data import GENERATORS, BenchmarkSpec
from .exceptions import ConfigError
from .nn import MlpSpec
from .noise import CIFAR10_ASYMMETRIC_MAP, NoiseSpec
from .training import IterationPlan, MlntHyper

SWEEP_AXES = ("n_synthetic", "relabel_fraction", "filter_threshold")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class BenchmarkConfig(_Strict):
    generator: Literal[GENERATORS] = "gaussian_blobs"
    n_train: int = Field(4000, ge=2)
    n_test: int = Field(2000, ge=1)
    n_features: int = Field(10, ge=1)
    n_classes: int = Field(4, ge=2)
    separation: float = Field(3.0, gt=0)
    # None: follow the replicate seed so each seed sees a fresh draw
    seed: Optional[int] = None
    val_fraction: float = Field(0.1, ge=0, lt=1)

    def spec_for(self, seed: int) -> BenchmarkSpec:
        fields = self.model_dump()
        fields["seed"] = seed if self.seed is None else self.seed
        return BenchmarkSpec(**fields)


class FileData(_Strict):
    train: Path
    val: Optional[Path] = None
    test: Optional[Path] = None
    n_classes: Optional[int] = Field(None, ge=2)
    # used only when no val file is given
    val_fraction: float = Field(0.1, ge=0, lt=1)
    # sample_id,original_label,noisy_label; replaces the train labels
    noisy_labels: Optional[Path] = None


class DataConfig(_Strict):
    benchmark: Optional[BenchmarkConfig] = None
    files: Optional[FileData] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.benchmark is None) == (self.files is None):
            raise ValueError("exactly one of data.benchmark or data.files must be given")
        return self


class NoiseConfig(_Strict):
    kind: Literal["none", "symmetric", "asymmetric"] = "symmetric"
    ratio: float = Field(0.5, ge=0, le=1)
    # asymmetric only; "cifar10" selects the built-in CIFAR-10 pairs
    class_map: Union[Literal["cifar10"], dict[int, int]] = "cifar10"

    def to_spec(self) -> NoiseSpec | None:
        if self.kind == "none":
            return None
        cmap = CIFAR10_ASYMMETRIC_MAP if self.class_map == "cifar10" else dict(self.class_map)
        return NoiseSpec(self.kind, self.ratio, cmap if self.kind == "asymmetric" else {})


class ModelConfig(_Strict):
    hidden: list[int] = Field(default_factory=lambda: [64])
    activation: Literal["relu", "tanh"] = "relu"

    @field_validator("hidden")
    @classmethod
    def _positive(cls, v):
        if any(h < 1 for h in v):
            raise ValueError("hidden layer sizes must be positive")
        return v

    def spec(self, n_inputs: int, n_classes: int) -> MlpSpec:
        return MlpSpec((n_inputs, *self.hidden, n_classes), self.activation)


class HyperConfig(_Strict):
    inner_lr: float = Field(0.2, ge=0)
    lr: float = Field(0.2, gt=0)
    meta_lr: float = Field(0.4, ge=0)
    meta_lr_rampup_epochs: float = Field(5.0, ge=0)
    meta_lr_rampup_every_iteration: bool = False
    ema_decay_warmup: float = Field(0.99, ge=0, le=1)
    ema_decay: float = Field(0.999, ge=0, le=1)
    ema_warmup_epochs: int = Field(5, ge=0)
    n_synthetic: int = Field(10, ge=0)
    relabel_fraction: float = Field(0.5, ge=0, le=1)
    filter_threshold: float = Field(0.3, ge=0, le=1)
    teacher_weight_max: float = Field(0.5, ge=0, le=1)
    n_neighbors: int = Field(10, ge=1)
    batch_size: int = Field(64, ge=1)
    epochs: int = Field(30, ge=1)
    # None: decay at 2/3 of the epochs
    lr_decay_epoch: Optional[int] = Field(None, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(1e-4, ge=0)

    def to_hyper(self) -> MlntHyper:
        fields = self.model_dump()
        if fields["lr_decay_epoch"] is None:
            fields["lr_decay_epoch"] = int(math.floor(2 * self.epochs / 3))
        return MlntHyper(**fields)


class IterationConfig(_Strict):
    count: int = Field(3, ge=1)
    # per-iteration hyper overrides, keyed by iteration number (1-based)
    overrides: dict[int, dict[str, Any]] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _known_fields(self):
        allowed = set(HyperConfig.model_fields)
        for it, over in self.overrides.items():
            if not 1 <= it <= self.count:
                raise ValueError(f"override for iteration {it} outside 1..{self.count}")
            unknown = set(over) - allowed
            if unknown:
                raise ValueError(f"overrides.{it}: unknown hyper key(s) {sorted(unknown)}")
        return self


class SweepConfig(_Strict):
    axis: Literal[SWEEP_AXES]
    values: list[float] = Field(min_length=1)


class ExperimentConfig(_Strict):
    seed: int = 0
    n_seeds: int = Field(5, ge=1)
    output_dir: Path = Path("runs/experiment")
    data: DataConfig
    noise: NoiseConfig = NoiseConfig()
    model: ModelConfig = ModelConfig()
    hyper: HyperConfig = HyperConfig()
    iterations: IterationConfig = IterationConfig()
    # None: same epoch count as a training iteration
    pretrain_epochs: Optional[int] = Field(None, ge=1)
    meta_mode: Literal["first_order", "full_fd"] = "first_order"
    sweep: Optional[SweepConfig] = None

    @model_validator(mode="after")
    def _check(self):
        self.hyper.to_hyper()
        for it, over in self.iterations.overrides.items():
            try:
                HyperConfig(**{**self.hyper.model_dump(), **over})
            except ValidationError as exc:
                raise ValueError(f"iterations.overrides.{it}: {_first_error(exc)}") from None
        if self.sweep is not None:
            for v in self.sweep.values:
                try:
                    HyperConfig(**{**self.hyper.model_dump(), self.sweep.axis: _axis_value(self.sweep.axis, v)})
                except (ValidationError, ValueError) as exc:
                    msg = _first_error(exc) if isinstance(exc, ValidationError) else str(exc)
                    raise ValueError(f"sweep.values: {v} invalid for {self.sweep.axis}: {msg}") from None
        if self.noise.kind == "asymmetric" and self.data.benchmark is not None:
            cmap = CIFAR10_ASYMMETRIC_MAP if self.noise.class_map == "cifar10" else self.noise.class_map
            c = self.data.benchmark.n_classes
            if any(not (0 <= k < c and 0 <= v < c) for k, v in cmap.items()):
                raise ValueError(f"noise.class_map refers to classes outside [0, {c})")
        return self

    def seeds(self) -> list[int]:
        return [self.seed + i for i in range(self.n_seeds)]

    def mlnt_hyper(self) -> MlntHyper:
        return self.hyper.to_hyper()

    def iteration_plan(self) -> IterationPlan:
        return IterationPlan(self.iterations.count, {k: dict(v) for k, v in self.iterations.overrides.items()})

    def with_hyper(self, **changes) -> "ExperimentConfig":
        return self.model_copy(update={"hyper": self.hyper.model_copy(update=changes)})


def _axis_value(axis: str, value: float):
    if axis == "n_synthetic":
        if value != int(value):
            raise ValueError("n_synthetic must be an integer")
        return int(value)
    return float(value)


def _first_error(exc: ValidationError) -> str:
    err = exc.errors()[0]
    path = ".".join(str(p) for p in err["loc"])
    return f"{path}: {err['msg']}" if path else err["msg"]


def config_from_dict(raw: dict, base_dir: str | os.PathLike | None = None) -> ExperimentConfig:
    """Validate a raw mapping. Relative paths resolve against ``base_dir`` when given."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at the top level")
    try:
        cfg = ExperimentConfig(**raw)
    except ValidationError as exc:
        raise ConfigError("; ".join(_format(e) for e in exc.errors())) from None
    if base_dir is not None:
        cfg = _resolve_paths(cfg, Path(base_dir))
    return cfg


def _format(err: dict) -> str:
    path = ".".join(str(p) for p in err["loc"])
    msg = err["msg"].removeprefix("Value error, ")
    if err["type"] == "extra_forbidden":
        return f"unknown key '{path}'"
    if err["type"] == "missing":
        return f"missing required key '{path}'"
    return f"{path}: {msg}" if path else msg


def _resolve_paths(cfg: ExperimentConfig, base: Path) -> ExperimentConfig:
    def fix(p):
        return p if p is None or p.is_absolute() else base / p

    update = {"output_dir": fix(cfg.output_dir)}
    if cfg.data.files is not None:
        f = cfg.data.files
        files = f.model_copy(update={k: fix(getattr(f, k)) for k in ("train", "val", "test", "noisy_labels")})
        update["data"] = cfg.data.model_copy(update={"files": files})
    return cfg.model_copy(update=update)


def parse_config(path: str | os.PathLike) -> ExperimentConfig:
    """Read and validate a YAML experiment config."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: YAML syntax error: {exc}") from None
    return config_from_dict(raw if raw is not None else {}, base_dir=path.parent)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return cfg.model_dump(mode="json")
