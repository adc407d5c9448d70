"""Run configuration: one YAML file with nested sections; unknown keys are errors."""

from __future__ import annotations

from fractions import Fraction
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .arch import BlockKind
from .construct import ConstructionConfig
from .data import AugmentPolicy
from .errors import ConfigError
from .train import TrainConfig


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataSection(_Section):
    dataset: Literal["synthetic", "cifar10"] = "synthetic"
    data_dir: Optional[str] = None
    limit: Optional[int] = Field(None, ge=1)
    test_limit: Optional[int] = Field(None, ge=1)
    classes: int = Field(10, ge=2)
    image_size: int = Field(16, ge=1)
    train_per_class: int = Field(100, ge=1)
    test_per_class: int = Field(50, ge=1)
    noise_sigma: float = Field(0.25, ge=0)
    jitter: int = Field(2, ge=0)


class AugmentSection(_Section):
    random_crop_pad: int = Field(0, ge=0)
    random_flip: bool = False
    brightness: float = Field(0.0, ge=0)
    contrast: Optional[tuple[float, float]] = None

    def policy(self) -> AugmentPolicy:
        return AugmentPolicy(self.random_crop_pad, self.random_flip, self.brightness, self.contrast)


class TrainingSection(_Section):
    epochs: int = Field(20, ge=1)
    batch_size: int = Field(64, ge=1)
    momentum: float = Field(0.9, ge=0, lt=1)
    schedule: Literal["exponential", "cosine", "constant"] = "cosine"
    learning_rate: float = Field(0.05, gt=0)
    min_learning_rate: float = Field(0.001, ge=0)
    decay_factor: float = Field(0.999, gt=0, le=1)
    decay_period_epochs: float = Field(20.0, gt=0)
    weight_decay: float = Field(3e-4, ge=0)
    clip_norm: Optional[float] = Field(5.0, gt=0)
    bn_momentum: float = Field(0.9, ge=0, lt=1)
    augment: AugmentSection = AugmentSection(random_crop_pad=2, random_flip=True)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size, momentum=self.momentum, schedule=self.schedule,
            learning_rate=self.learning_rate, decay_factor=self.decay_factor,
            decay_period_epochs=self.decay_period_epochs, min_learning_rate=self.min_learning_rate,
            weight_decay=self.weight_decay, clip_norm=self.clip_norm, augment=self.augment.policy(),
            bn_momentum=self.bn_momentum,
        )


def _candidate_defaults() -> TrainingSection:
    return TrainingSection(
        epochs=2, batch_size=50, schedule="exponential", learning_rate=0.04, decay_factor=0.999,
        decay_period_epochs=2.0, weight_decay=0.0, clip_norm=None, augment=AugmentSection(),
    )


class ConstructionSection(_Section):
    envelope: str = "32/2-2-2/6"
    max_iterations: int = Field(5, ge=0)
    prune_count: int = Field(6, ge=1)
    max_prune_fraction: str = "1/3"
    stage_construction_mask: Optional[list[bool]] = [True, True, False]
    max_layers_per_stage: Optional[list[int]] = None
    envelope_cell: Optional[list[BlockKind]] = None
    skip_prune_fraction: str = "1/2"
    statistic: Literal["l2", "variance"] = "l2"
    record_history: bool = True

    @field_validator("max_prune_fraction", "skip_prune_fraction", mode="before")
    @classmethod
    def _rational(cls, v):
        try:
            f = Fraction(str(v))
        except (ValueError, ZeroDivisionError) as exc:
            raise ValueError(f"not a rational number: {v!r}") from exc
        if not 0 <= f <= 1:
            raise ValueError("fraction must lie in [0, 1]")
        return str(f)

    def construction_config(self, seed: int, truncated_epochs: int) -> ConstructionConfig:
        return ConstructionConfig(
            max_iterations=self.max_iterations,
            truncated_epochs=truncated_epochs,
            prune_count=self.prune_count,
            max_prune_fraction=Fraction(self.max_prune_fraction),
            stage_construction_mask=None if self.stage_construction_mask is None else tuple(self.stage_construction_mask),
            max_layers_per_stage=None if self.max_layers_per_stage is None else tuple(self.max_layers_per_stage),
            envelope_cell=None if self.envelope_cell is None else tuple(self.envelope_cell),
            skip_prune_fraction=Fraction(self.skip_prune_fraction),
            seed=seed,
            statistic=self.statistic,
            record_history=self.record_history,
        )


class RunConfig(_Section):
    seed: int = 0
    deterministic: bool = True
    dtype: Literal["float32", "float64"] = "float32"
    data: DataSection = DataSection()
    construction: ConstructionSection = ConstructionSection()
    candidate_training: TrainingSection = Field(default_factory=_candidate_defaults)
    final_training: TrainingSection = TrainingSection()
    baseline_count: int = Field(5, ge=0)

    def construction_config(self) -> ConstructionConfig:
        return self.construction.construction_config(self.seed, self.candidate_training.epochs)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)


def parse_config(doc: dict | None) -> RunConfig:
    try:
        return RunConfig.model_validate(doc or {})
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if doc is not None and not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(doc)
