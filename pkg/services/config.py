"""
Structured configuration: YAML file -> validated pydantic models.
"""

import logging
from pathlib import Path
from typing import List, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from services.errors import ConfigError

logger = logging.getLogger(__name__)

STAGE_ORDER = ("S1", "S2", "S3")
FUSION_MODES = ("C+F", "C+F_rec", "C+F+F_rec")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelConfig(_Section):
    latent_dim: int = Field(512, ge=8)
    blocks: List[int] = [12, 12, 12]
    window: int = Field(120, ge=2)
    stages: List[str] = list(STAGE_ORDER)
    fusion: Literal["C+F", "C+F_rec", "C+F+F_rec"] = "C+F+F_rec"
    T: int = Field(1000, ge=1)
    schedule: Literal["cosine", "linear"] = "cosine"
    init_std: float = Field(0.02, gt=0)
    # frames; Wmix starts as a Gaussian band of this width
    mix_init_sigma: float = Field(2.0, gt=0)
    # frames; Gaussian low-pass on every stage head, 0 disables
    output_smoothing: float = Field(2.5, ge=0)

    @field_validator("blocks")
    @classmethod
    def check_blocks(cls, v):
        if len(v) != 3 or any(b < 1 for b in v):
            raise ValueError("blocks must list three positive block counts (S1, S2, S3)")
        return v

    @field_validator("stages")
    @classmethod
    def check_stages(cls, v):
        if "S3" not in v:
            raise ValueError("the S3 (22-joint) stage is mandatory")
        unknown = set(v) - set(STAGE_ORDER)
        if unknown:
            raise ValueError(f"unknown stages {sorted(unknown)}")
        if len(set(v)) != len(v):
            raise ValueError("stages must not repeat")
        return [s for s in STAGE_ORDER if s in v]

    def blocks_for(self, sid: str) -> int:
        return self.blocks[STAGE_ORDER.index(sid)]


class TrainConfig(_Section):
    loss_weights: List[float] = [1.0, 1.0, 1.0]
    batch_size: int = Field(16, ge=1)
    steps: int = Field(3000, ge=1)
    lr: float = Field(3e-4, ge=0)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = Field(1.0, ge=0)
    seed: int = 7
    dtype: Literal["float32", "float64"] = "float32"
    log_every: int = Field(50, ge=1)
    smoothing: float = Field(0.98, ge=0, lt=1)
    eval_every: int = Field(0, ge=0)

    @field_validator("loss_weights")
    @classmethod
    def check_weights(cls, v):
        if len(v) != 3:
            raise ValueError("loss_weights needs three values (alpha, beta, gamma)")
        if any(w < 0 for w in v):
            raise ValueError("loss weights must be non-negative")
        if v[2] <= 0:
            raise ValueError("the S3 loss weight must be positive")
        return v


class InferenceConfig(_Section):
    window: int = Field(120, ge=2)
    history: int = Field(12, ge=0)
    ddim_steps: int = Field(4, ge=1)
    eta: float = Field(0.0, ge=0)
    sampler: Literal["ddim", "ddpm"] = "ddim"
    seed: int = 0
    crossfade: bool = False
    checkpoint: Optional[Path] = None
    output_format: Literal["mage", "csv"] = "mage"

    @model_validator(mode="after")
    def check_history(self):
        if self.history >= self.window:
            raise ValueError(f"history ({self.history}) must be smaller than window ({self.window})")
        return self


class DataConfig(_Section):
    kind: Literal["walk", "reach", "squat", "kick", "mixed"] = "mixed"
    count: int = Field(512, ge=1)
    frames: int = Field(120, ge=2)
    fps: float = Field(60.0, gt=0)
    seed: int = 7
    holdout: int = Field(64, ge=0)


class MageConfig(_Section):
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    inference: InferenceConfig = InferenceConfig()
    data: DataConfig = DataConfig()

    @model_validator(mode="after")
    def check_windows(self):
        if self.inference.window != self.model.window:
            raise ValueError(
                f"inference window ({self.inference.window}) must equal model window ({self.model.window})"
            )
        if self.inference.ddim_steps > self.model.T:
            raise ValueError("ddim_steps cannot exceed T")
        return self


def load_config(path: Optional[Union[str, Path]] = None) -> MageConfig:
    """
    Read a YAML config file; missing sections fall back to defaults.

    Raises:
        ConfigError: unreadable file or any violated constraint
    """
    if path is None:
        return MageConfig()
    try:
        with open(path, "r") as f:
            raw = yaml.safe_load(f) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        cfg = MageConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid config {path}: {e}") from e
    logger.debug("loaded config from %s", path)
    return cfg
