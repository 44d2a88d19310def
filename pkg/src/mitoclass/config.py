"""
Config: typed, validated configuration for every stage of a run.

All models are pydantic; `validated()` turns pydantic's ValidationError into
InvalidConfig so callers only ever see mitoclass errors. `desk_profile()` holds
the built-in defaults, and `resolve()` layers a JSON config file and explicit
overrides on top of them.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Literal, Optional, TypeVar, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.mitoclass.errors import InvalidConfig

SEED_ENV_VAR = "MITOCLASS_SEED"
MAX_SEED = (1 << 64) - 1

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

InputMode = Literal["rgb", "rgb_hed", "crop_rgb_hed"]
HardnessHeadMode = Literal["binary", "four_class"]

M = TypeVar("M", bound=BaseModel)


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SyntheticConfig(_Model):
    n_patches: int = Field(200, ge=1)
    amf_rate: float = Field(0.1465, ge=0.0, le=1.0)
    hard_rate: float = Field(0.137, ge=0.0, le=1.0)
    n_domains: int = Field(4, ge=1)
    seed: int = Field(0, ge=0, le=MAX_SEED)


class AugPolicy(_Model):
    resize_to: int = Field(224, ge=1)
    p_hflip: float = Field(0.5, ge=0.0, le=1.0)
    p_vflip: float = Field(0.5, ge=0.0, le=1.0)
    max_rotation_deg: float = Field(10.0, ge=0.0, le=180.0)
    brightness_delta: float = Field(0.2, ge=0.0, lt=1.0)
    contrast_delta: float = Field(0.3, ge=0.0, lt=1.0)
    saturation_delta: float = Field(0.1, ge=0.0, le=1.0)
    normalize_mean: tuple[float, float, float] = IMAGENET_MEAN
    normalize_std: tuple[float, float, float] = IMAGENET_STD
    crop_size: int = Field(80, ge=1)
    enabled: bool = True

    @model_validator(mode="after")
    def _positive_std(self) -> "AugPolicy":
        if any(s <= 0 for s in self.normalize_std):
            raise ValueError("normalize_std components must be > 0")
        return self

    def disabled(self) -> "AugPolicy":
        return self.model_copy(update={"enabled": False})


class ArchConfig(_Model):
    backbone: str = "desk_cnn"
    feature_dim: int = Field(64, ge=1)
    shared_dim: int = Field(32, ge=1)
    n_expert_heads: Literal[3] = 3
    hardness_head_mode: HardnessHeadMode = "binary"
    dropout: float = Field(0.0, ge=0.0, lt=1.0)
    input_mode: InputMode = "rgb"
    input_channels: Optional[int] = Field(None, exclude=True)
    conv_channels: tuple[int, ...] = (8, 16, 32)
    dtype: Literal["float32", "float64"] = "float32"
    aggregation: Literal["mean", "vote"] = "mean"

    @model_validator(mode="after")
    def _channels_match_mode(self) -> "ArchConfig":
        expected = 3 if self.input_mode == "rgb" else 6
        if self.input_channels is None:
            object.__setattr__(self, "input_channels", expected)
        elif self.input_channels != expected:
            raise ValueError(
                f"input_channels={self.input_channels} does not match "
                f"input_mode='{self.input_mode}' ({expected} channels)"
            )
        if not self.conv_channels or any(c < 1 for c in self.conv_channels):
            raise ValueError("conv_channels must be a non-empty list of positive widths")
        return self

    @property
    def hardness_width(self) -> int:
        return 4 if self.hardness_head_mode == "four_class" else 1


class FocalParams(_Model):
    alpha: float = Field(0.25, gt=0.0, lt=1.0)
    gamma: float = Field(2.0, ge=0.0)


class TrainConfig(_Model):
    lr0: float = Field(1e-4, ge=0.0)
    batch_size: int = Field(8, ge=1)
    max_epochs: int = Field(50, ge=1)
    patience: int = Field(20, ge=1)
    eta_min: float = Field(0.0, ge=0.0)
    theta: float = Field(0.5, ge=0.0, le=1.0)
    focal: FocalParams = FocalParams()
    seed: int = Field(0, ge=0, le=MAX_SEED)
    weight_decay: float = Field(0.01, ge=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps_adam: float = Field(1e-8, gt=0.0)

    @model_validator(mode="after")
    def _lr_above_floor(self) -> "TrainConfig":
        if not self.lr0 > self.eta_min:
            raise ValueError(f"lr0 ({self.lr0}) must exceed eta_min ({self.eta_min})")
        return self


class SearchSpace(_Model):
    alpha: tuple[float, float] = (0.1, 0.9)
    gamma: tuple[float, float] = (0.0, 5.0)
    lr: tuple[float, float] = (1e-5, 1e-3)
    dropout: tuple[float, float] = (0.0, 0.5)

    @model_validator(mode="after")
    def _ordered_ranges(self) -> "SearchSpace":
        for name in ("alpha", "gamma", "lr", "dropout"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
        if self.lr[0] <= 0:
            raise ValueError("lr range must be strictly positive (sampled log-uniformly)")
        return self


class RunConfig(_Model):
    synthetic: SyntheticConfig = SyntheticConfig()
    policy: AugPolicy = AugPolicy(resize_to=64)
    arch: ArchConfig = ArchConfig()
    train: TrainConfig = TrainConfig()
    search: SearchSpace = SearchSpace()
    k: int = Field(5, ge=2)
    split_seed: int = Field(0, ge=0, le=MAX_SEED)
    n_trials: int = Field(8, ge=1)
    hpo_max_epochs: int = Field(10, ge=1)


def validated(model: type[M], data: Union[M, dict[str, Any]]) -> M:
    if isinstance(data, model):
        data = data.model_dump()
    try:
        return model.model_validate(data)
    except ValidationError as e:
        details = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or model.__name__}: {err['msg']}"
            for err in e.errors()
        )
        raise InvalidConfig(f"invalid {model.__name__}: {details}") from None


def desk_profile() -> RunConfig:
    return RunConfig()


def deep_merge(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def seed_from_env() -> Optional[int]:
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None or raw.strip() == "":
        return None
    try:
        seed = int(raw)
    except ValueError:
        raise InvalidConfig(f"{SEED_ENV_VAR} must be an integer, got '{raw}'") from None
    if not 0 <= seed <= MAX_SEED:
        raise InvalidConfig(f"{SEED_ENV_VAR} out of range: {seed}")
    return seed


def load_config_file(path: Union[Path, str]) -> dict[str, Any]:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise InvalidConfig(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise InvalidConfig(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(data, dict):
        raise InvalidConfig(f"config file {path} must hold a JSON object")
    return data


def resolve(
    config_file: Optional[Union[Path, str]] = None,
    overrides: Optional[dict[str, Any]] = None,
) -> RunConfig:
    """Flags (`overrides`) > config file > desk defaults."""
    data = desk_profile().model_dump(mode="json")
    if config_file is not None:
        data = deep_merge(data, load_config_file(config_file))
    if overrides:
        data = deep_merge(data, overrides)
    return validated(RunConfig, data)


def to_json(model: BaseModel) -> str:
    return json.dumps(model.model_dump(mode="json"), sort_keys=True, indent=2) + "\n"
