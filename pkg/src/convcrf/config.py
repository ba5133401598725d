"""JSON run configuration shared by all CLI commands.

Unknown keys are rejected at every level so typos fail before any work
starts.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ConfigurationError
from .kernels import spatial_features
from .meanfield import ConvCrfConfig
from .params import CrfParams
from .synthetic import NoiseConfig
from .training import TrainConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CrfSection(_Strict):
    filter_size: int = 7
    iterations: int = Field(5, ge=1)
    blur_factor: int = Field(4, ge=1)
    normalization: Literal["softmax"] = "softmax"
    compatibility: Literal["potts", "matrix"] = "potts"
    exclude_center: bool = True
    blur_mode: Literal["message", "resolution"] = "message"

    @field_validator("filter_size")
    @classmethod
    def _odd(cls, v):
        if v < 1 or v % 2 == 0:
            raise ValueError("filter_size must be a positive odd integer")
        return v

    def build(self):
        return ConvCrfConfig(**self.model_dump())


class ParamsSection(_Strict):
    weights: tuple[float, float] = (1.0, 1.0)
    thetas: tuple[float, float, float] = (13.0, 13.0, 3.0)
    learn_smoothness_features: bool = False
    compatibility_matrix: Optional[list[list[float]]] = None

    @field_validator("weights")
    @classmethod
    def _non_negative(cls, v):
        if any(x < 0 for x in v):
            raise ValueError("kernel weights must be non-negative")
        return v

    @field_validator("thetas")
    @classmethod
    def _positive(cls, v):
        if any(x <= 0 for x in v):
            raise ValueError("bandwidths must be positive")
        return v

    def build(self, num_classes, height=None, width=None, compatibility="potts"):
        sf = None
        if self.learn_smoothness_features:
            if height is None or width is None:
                raise ConfigurationError("learnable smoothness features need a fixed image size")
            pos = spatial_features(1, height, width)
            sf = np.stack([pos["pos_x"][0], pos["pos_y"][0]])
        matrix = self.compatibility_matrix
        if matrix is None and compatibility == "matrix":
            matrix = 1.0 - np.eye(num_classes)
        return CrfParams.create(self.weights, self.thetas, sf, matrix)


class NoiseSection(_Strict):
    down_factor: int = Field(8, ge=1)
    flip_prob: float = Field(0.1, ge=0.0, le=1.0)
    num_classes: int = Field(21, ge=1)
    seed: int = 0

    def build(self):
        return NoiseConfig(**self.model_dump())


class SynthesizeSection(_Strict):
    count: int = Field(10, ge=1)
    height: int = Field(64, ge=1)
    width: int = Field(64, ge=1)
    confidence: float = Field(0.9, gt=0.5, lt=1.0)


class TrainSection(_Strict):
    learning_rate: float = Field(1e-3, ge=0.0)
    steps: int = Field(100, ge=0)
    batch_size: int = Field(1, ge=1)
    optimizer: Literal["adam", "sgd"] = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    trainable: Optional[list[Literal["log_weights", "log_thetas", "smoothness_features", "compatibility"]]] = None
    resume_from: Optional[str] = None

    def build(self):
        values = self.model_dump(exclude={"resume_from"})
        values["trainable"] = tuple(values["trainable"]) if values["trainable"] else None
        return TrainConfig(**values)


class BenchSection(_Strict):
    sizes: list[tuple[int, int]] = [(64, 64), (64, 128)]
    filter_sizes: list[int] = [1, 5, 7, 11]
    num_classes: int = Field(21, ge=1)
    repetitions: int = Field(10, ge=5)
    warmup: int = Field(2, ge=0)
    iterations: int = Field(5, ge=1)


class PathsSection(_Strict):
    dataset: Optional[str] = None
    predictions: Optional[str] = None
    output: Optional[str] = None


class RunConfig(_Strict):
    crf: CrfSection = CrfSection()
    params: ParamsSection = ParamsSection()
    noise: NoiseSection = NoiseSection()
    synthesize: SynthesizeSection = SynthesizeSection()
    train: TrainSection = TrainSection()
    bench: BenchSection = BenchSection()
    paths: PathsSection = PathsSection()


def load_config(path=None, text=None):
    """Parse and validate a run configuration; raises :class:`ConfigurationError`."""
    try:
        if path is not None:
            raw = json.loads(Path(path).read_text())
        elif text is not None:
            raw = json.loads(text)
        else:
            raw = {}
        return RunConfig.model_validate(raw)
    except (OSError, json.JSONDecodeError, ValidationError) as exc:
        raise ConfigurationError(f"invalid run configuration: {exc}") from exc


def dump_config(config):
    return config.model_dump(mode="json")
