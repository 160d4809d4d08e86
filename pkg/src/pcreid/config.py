"""
Run configuration, read from TOML files into validated (frozen) pydantic models.

Each TOML section maps to one model; unknown keys are rejected.

"""

from __future__ import annotations

import os
import sys
from collections.abc import Mapping
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError

if sys.version_info < (3, 11):
    import tomli as tomllib
else:
    import tomllib

DATA_ROOT_VARIABLE = "PCREID_DATA_ROOT"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SensorConfig(_Section):
    h_fov_deg: float = Field(100.0, gt=0, le=360)
    v_fov_deg: float = Field(40.0, gt=0, lt=180)
    h_resolution_deg: float = Field(0.5, gt=0)
    v_resolution_deg: float = Field(0.27, gt=0)
    range_noise: float = Field(0.02, ge=0)
    frame_rate: float = Field(10.0, gt=0)
    distance: float = Field(8.0, gt=0)
    height: float = Field(1.2, ge=0)
    max_rays: int = Field(4096, ge=1)


class SynthConfig(_Section):
    identities: int = Field(12, ge=1)
    views: int = Field(4, ge=1)
    sequences_per_view: int = Field(1, ge=1)
    frames: int = Field(30, ge=1)
    test_fraction: float = Field(0.3, ge=0, lt=1)
    min_shape_separation: float = Field(0.0, ge=0)
    disjoint_test_views: bool = False
    truth_points: int = Field(512, ge=1)
    workers: int = Field(1, ge=1)
    sensor: SensorConfig = SensorConfig()


class EncoderConfig(_Section):
    name: str = "gcee"
    points: int = Field(256, ge=1)
    k: int = Field(10, ge=1)
    backbone_widths: tuple[int, ...] = (64, 128, 512)
    branch_width: int = Field(512, ge=1)
    erase_neighbors: int = Field(8, ge=1)
    cfe_mode: Literal["full", "no_eraser", "no_cfe"] = "full"
    negative_slope: float = Field(0.2, ge=0)

    @model_validator(mode="after")
    def check_widths(self) -> EncoderConfig:
        if not self.backbone_widths or min(self.backbone_widths) < 1:
            raise ValueError("backbone_widths must list at least one positive width")

        if self.k > self.points:
            raise ValueError(f"k={self.k} exceeds the {self.points} input points")

        if self.erase_neighbors + 1 > self.points:
            raise ValueError("erase_neighbors + 1 exceeds the number of input points")

        return self


class TemporalConfig(_Section):
    name: str = "transformer"
    layers: int = Field(4, ge=1)
    heads: int = Field(4, ge=1)
    feedforward: int = Field(2048, ge=1)
    positional: Literal["sinusoidal", "none"] = "sinusoidal"
    max_length: int = Field(30, ge=1)


class TrainConfig(_Section):
    epochs: int = Field(700, ge=1)
    identities_per_batch: int = Field(6, ge=2)
    sequences_per_identity: int = Field(6, ge=1)
    sequence_length: int = Field(30, ge=1)
    batches_per_epoch: int | None = Field(None, ge=1)
    learning_rate: float = Field(5e-5, gt=0)
    weight_decay: float = Field(5e-5, gt=0)
    lr_cycle: int = Field(200, ge=2)
    lr_floor: float = Field(1e-7, gt=0)
    triplet_weight: float = Field(1.0, ge=0)
    margin: float = Field(0.3, ge=0)
    checkpoint_every: int = Field(50, ge=1)

    @model_validator(mode="after")
    def check_floor(self) -> TrainConfig:
        if self.lr_floor > self.learning_rate:
            raise ValueError("lr_floor must not exceed learning_rate")

        return self


class PretrainConfig(_Section):
    epochs: int = Field(700, ge=1)
    batch_size: int = Field(32, ge=1)
    learning_rate: float = Field(1e-4, gt=0)
    weight_decay: float = Field(5e-5, gt=0)
    lr_cycle: int = Field(200, ge=2)
    lr_floor: float = Field(1e-7, gt=0)
    shape_weight: float = Field(1.0, ge=0)
    delta_milestones: tuple[int, ...] = (100, 200, 400)
    delta_values: tuple[float, ...] = (0.01, 0.1, 0.5, 1.0)
    coarse_points: int = Field(128, ge=1)
    grid_size: int = Field(2, ge=1)
    decoder_width: int = Field(1024, ge=1)
    folding_width: int = Field(512, ge=1)
    shape_widths: tuple[int, ...] = (256, 128)
    checkpoint_every: int = Field(50, ge=1)

    @model_validator(mode="after")
    def check_schedule(self) -> PretrainConfig:
        if len(self.delta_values) != len(self.delta_milestones) + 1:
            raise ValueError("delta_values needs exactly one more entry than milestones")

        if list(self.delta_milestones) != sorted(set(self.delta_milestones)):
            raise ValueError("delta_milestones must be strictly increasing")

        if any(value < 0 for value in self.delta_values):
            raise ValueError("delta_values must be non-negative")

        return self


class EvaluateConfig(_Section):
    sequence_length: int | None = Field(None, ge=1)
    ranks: tuple[int, ...] = (1, 3, 5, 10)


class RunConfig(_Section):
    synth: SynthConfig = SynthConfig()
    encoder: EncoderConfig = EncoderConfig()
    temporal: TemporalConfig = TemporalConfig()
    pretrain: PretrainConfig = PretrainConfig()
    train: TrainConfig = TrainConfig()
    evaluate: EvaluateConfig = EvaluateConfig()


def _merge(base: dict[str, Any], overrides: Mapping[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        elif value is not None:
            merged[key] = value

    return merged


def load_config(
    path: Path | str | None = None, overrides: Mapping[str, Any] | None = None
) -> RunConfig:
    """
    Build a :class:`RunConfig` from an optional TOML file and command line overrides.

    :param path: TOML file with any of the section tables
    :param overrides: nested mapping of values taking precedence over the file;
        ``None`` values are ignored

    """
    raw: dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "rb") as fp:
                raw = tomllib.load(fp)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from exc

    if overrides:
        raw = _merge(raw, overrides)

    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration:\n{exc}") from exc


def default_data_root() -> Path | None:
    value = os.environ.get(DATA_ROOT_VARIABLE)
    return Path(value) if value else None
