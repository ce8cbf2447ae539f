# app/config.py
"""
vdim configuration
Process settings from the environment plus the run configuration tree read from YAML
"""
import hashlib
import json
import logging
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.exceptions import ConfigurationError
from app.models import (
    ClassifierInput,
    ColorMode,
    CropMode,
    DatasetSource,
    EncoderPreset,
    LossReduction,
    NegativeMode,
    OffsetMode,
    Precision,
)

# Load environment variables from .env file
load_dotenv(override=False)

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    """Process settings loaded from environment variables (prefix VDIM_)."""

    output_dir: Path = Field(Path("runs"))
    log_level: str = Field("INFO")
    device: str = Field("auto")
    num_workers: int = Field(0, ge=0)
    deterministic: bool = Field(False)

    model_config = SettingsConfigDict(
        env_prefix="VDIM_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    def resolve_device(self):
        import torch

        if self.device == "auto":
            return torch.device("cuda" if torch.cuda.is_available() else "cpu")
        return torch.device(self.device)


@lru_cache()
def get_settings() -> Settings:
    """Get process settings."""
    settings = Settings()
    logger.debug(f"Settings loaded: {settings.model_dump_json()}")
    return settings


# ---------------------------------------------------------------------------
# Run configuration tree
# ---------------------------------------------------------------------------

class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, use_enum_values=False)


class SyntheticMotionSpec(_Section):
    class_count: int = Field(4, ge=0, le=8)
    clip_length: int = Field(96, ge=1)
    resolution: Tuple[int, int] = (64, 64)
    clips_per_class: int = Field(125, ge=0)
    seed: int = 0
    train_fraction: float = Field(0.8, gt=0.0, lt=1.0)
    fps: float = Field(25.0, gt=0.0)
    # pixels per frame at the rendered resolution
    speed: float = Field(0.5, gt=0.0)
    size_range: Tuple[int, int] = (6, 24)
    class_permutation: Optional[Tuple[int, ...]] = None

    @model_validator(mode="after")
    def _check_geometry(self):
        if min(self.resolution) < 8:
            raise ValueError(f"resolution must be at least 8x8, got {self.resolution}")
        low, high = self.size_range
        if not 1 <= low <= high < min(self.resolution):
            raise ValueError(f"size_range {self.size_range} must fit inside resolution {self.resolution}")
        if self.class_permutation is not None and sorted(self.class_permutation) != list(range(self.class_count)):
            raise ValueError(f"class_permutation must be a permutation of 0..{self.class_count - 1}")
        return self


class DatasetConfig(_Section):
    source: DatasetSource = DatasetSource.SYNTHETIC
    root: Optional[Path] = None
    manifest: Optional[Path] = None
    class_count: Optional[int] = Field(None, ge=1)
    synthetic: SyntheticMotionSpec = SyntheticMotionSpec()
    # decoded frames are resized to (H, W)
    frame_size: Tuple[int, int] = (128, 128)
    windows_per_video: int = Field(1, ge=1)


class ViewConfig(_Section):
    final_length: int = Field(32, ge=1)
    offset_mode: OffsetMode = OffsetMode.ZERO
    offset_frames: int = Field(32, ge=0)
    downsample_factors: Tuple[int, int] = (1, 2)
    crop_mode: CropMode = CropMode.RANDOM
    crop_size: int = Field(128, ge=1)
    crop_scale: Tuple[float, float] = (0.3, 1.0)
    crop_ratio: Tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)
    brightness: float = Field(0.4, ge=0.0)
    contrast: float = Field(0.4, ge=0.0)
    saturation: float = Field(0.4, ge=0.0)
    hue: float = Field(0.1, ge=0.0, le=0.5)
    grayscale_p: float = Field(0.25, ge=0.0, le=1.0)
    rotation: bool = False
    rotation_angles: Tuple[int, ...] = (0, 90, 180, 270)
    color_mode: ColorMode = ColorMode.JITTER_GRAY

    @field_validator("downsample_factors")
    @classmethod
    def _positive_factors(cls, value):
        if any(factor < 1 for factor in value):
            raise ValueError(f"downsample factors must be >= 1, got {value}")
        return value

    @field_validator("rotation_angles")
    @classmethod
    def _quarter_turns(cls, value):
        if not value or any(angle % 90 for angle in value):
            raise ValueError(f"rotation angles must be non-empty multiples of 90, got {value}")
        return value

    @model_validator(mode="after")
    def _check_ranges(self):
        low, high = self.crop_scale
        if not 0.0 < low <= high <= 1.0:
            raise ValueError(f"crop_scale must satisfy 0 < low <= high <= 1, got {self.crop_scale}")
        low, high = self.crop_ratio
        if not 0.0 < low <= high:
            raise ValueError(f"crop_ratio must satisfy 0 < low <= high, got {self.crop_ratio}")
        return self

    @classmethod
    def identity(cls, final_length: int = 32, crop_size: int = 128,
                 downsample_factors: Tuple[int, int] = (1, 1), **overrides) -> "ViewConfig":
        """Degenerate augmentation: whole frame resized, no color change, no rotation"""
        values = dict(
            final_length=final_length,
            crop_size=crop_size,
            downsample_factors=downsample_factors,
            crop_mode=CropMode.FULL,
            crop_scale=(1.0, 1.0),
            crop_ratio=(1.0, 1.0),
            brightness=0.0,
            contrast=0.0,
            saturation=0.0,
            hue=0.0,
            grayscale_p=0.0,
            rotation=False,
            color_mode=ColorMode.JITTER_GRAY,
        )
        values.update(overrides)
        return cls(**values)

    def for_evaluation(self) -> "ViewConfig":
        """Test-time recipe: center resized-crop only, color space kept"""
        return self.model_copy(update=dict(
            crop_mode=CropMode.CENTER,
            brightness=0.0,
            contrast=0.0,
            saturation=0.0,
            hue=0.0,
            grayscale_p=0.0,
            rotation=False,
        ))


class EncoderConfig(_Section):
    preset: EncoderPreset = EncoderPreset.FULL
    tap_layers: Tuple[int, ...] = (5, 6, 8)
    # batch norm inside R(2+1)D blocks
    block_norm: bool = True
    # batch norm on every tap output
    output_norm: bool = True
    head_dim: int = Field(512, ge=1)
    head_hidden: int = Field(512, ge=1)

    @field_validator("tap_layers")
    @classmethod
    def _tap_range(cls, value):
        if not value or any(not 1 <= tap <= 8 for tap in value):
            raise ValueError(f"tap layers must be a non-empty subset of 1..8, got {value}")
        return tuple(sorted(set(value)))


class LayerPairConfig(_Section):
    antecedent: Tuple[int, ...] = (5, 6, 8)
    consequent: Tuple[int, ...] = (8,)
    symmetric: bool = True

    @model_validator(mode="after")
    def _non_empty(self):
        if not self.antecedent or not self.consequent:
            raise ValueError("antecedent and consequent layer sets must be non-empty")
        return self

    def pairs(self) -> List[Tuple[int, int]]:
        """(j, j') loss terms; the reverse pairing repeats with roles swapped"""
        forward = [(j, jp) for j in self.antecedent for jp in self.consequent]
        if not self.symmetric:
            return forward
        return forward + [(jp, j) for j in self.antecedent for jp in self.consequent]

    def antecedent_layers(self) -> List[int]:
        return sorted({j for j, _ in self.pairs()})

    def consequent_layers(self) -> List[int]:
        return sorted({jp for _, jp in self.pairs()})


class PretrainConfig(_Section):
    steps: int = Field(1000, ge=1)
    batch_size: int = Field(32, ge=2)
    learning_rate: float = Field(2e-4, ge=0.0)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = Field(1e-8, gt=0.0)
    layer_pairs: LayerPairConfig = LayerPairConfig()
    temporal_difference: bool = False
    negative_mode: NegativeMode = NegativeMode.ALL_LOCATIONS
    loss_reduction: LossReduction = LossReduction.SUM
    # soft clip bound for scores, disabled when None
    score_clip: Optional[float] = Field(None, gt=0.0)
    grad_clip: Optional[float] = Field(None, gt=0.0)
    seed: Optional[int] = None
    checkpoint_interval: int = Field(500, ge=1)
    log_interval: int = Field(10, ge=1)
    precision: Precision = Precision.FLOAT32


class FinetuneConfig(_Section):
    views: int = Field(4, ge=1)
    hidden: int = Field(1024, ge=1)
    dropout: float = Field(0.2, ge=0.0, lt=1.0)
    initial_lr: float = Field(1e-3, ge=0.0)
    decay_factor: float = Field(0.5, gt=0.0, le=1.0)
    decay_every: int = Field(500, ge=1)
    downsample: int = Field(1, ge=1)
    color_mode: ColorMode = ColorMode.LAB_DROPOUT
    steps: int = Field(1000, ge=1)
    batch_size: int = Field(16, ge=1)
    seed: Optional[int] = None
    classifier_input: ClassifierInput = ClassifierInput.PROJECTED
    freeze_encoder: bool = False
    freeze_batch_norm: bool = False
    samples_per_video: int = Field(8, ge=1)
    eval_interval: int = Field(0, ge=0)
    log_interval: int = Field(10, ge=1)
    precision: Precision = Precision.FLOAT32


class RunConfig(_Section):
    dataset: DatasetConfig = DatasetConfig()
    view: ViewConfig = ViewConfig()
    encoder: EncoderConfig = EncoderConfig()
    pretrain: PretrainConfig = PretrainConfig()
    finetune: FinetuneConfig = FinetuneConfig()
    output_dir: Optional[Path] = None
    seed: int = 0

    @model_validator(mode="before")
    @classmethod
    def _inherit_seeds(cls, data: Any) -> Any:
        # section seeds default to the run seed
        if not isinstance(data, dict):
            return data
        data = dict(data)
        seed = data.get("seed", 0)
        for section in ("pretrain", "finetune"):
            block = data.get(section)
            if block is None:
                data[section] = {"seed": seed}
            elif isinstance(block, dict) and block.get("seed") is None:
                data[section] = {**block, "seed": seed}
            elif isinstance(block, BaseModel) and getattr(block, "seed", None) is None:
                data[section] = block.model_copy(update={"seed": seed})
        return data

    def resolved_output_dir(self) -> Path:
        return Path(self.output_dir) if self.output_dir is not None else get_settings().output_dir


# ---------------------------------------------------------------------------
# Loading, overrides, hashing
# ---------------------------------------------------------------------------

def parse_override(text: str) -> Tuple[List[str], Any]:
    """Parse '--section.key=value' into (['section', 'key'], value)"""
    body = text[2:] if text.startswith("--") else text
    if "=" not in body:
        raise ConfigurationError(f"override '{text}' must have the form --section.key=value")
    path, raw = body.split("=", 1)
    keys = [key for key in path.split(".") if key]
    if not keys:
        raise ConfigurationError(f"override '{text}' has an empty key path")
    try:
        value = yaml.safe_load(raw) if raw != "" else None
    except yaml.YAMLError as e:
        raise ConfigurationError(f"override '{text}' has an unparseable value: {e}")
    return keys, value


def apply_overrides(data: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """Return a copy of `data` with every dot-path override applied"""
    result = json.loads(json.dumps(data, default=str))
    for override in overrides:
        keys, value = parse_override(override)
        node = result
        for key in keys[:-1]:
            child = node.get(key)
            if child is None:
                child = {}
                node[key] = child
            elif not isinstance(child, dict):
                raise ConfigurationError(f"override '{override}': '{key}' is not a section")
            node = child
        node[keys[-1]] = value
    return result


def build_run_config(data: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"invalid run configuration:\n{e}") from e


def load_run_config(path: Optional[Path] = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Load a YAML run configuration and apply CLI overrides"""
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            loaded = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as e:
            raise ConfigurationError(f"config file {path} is not valid YAML: {e}") from e
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigurationError(f"config file {path} must contain a mapping at the top level")
        data = loaded or {}
    return build_run_config(apply_overrides(data, overrides))


def run_config_to_dict(cfg: BaseModel) -> Dict[str, Any]:
    return cfg.model_dump(mode="json")


def config_hash(cfg: BaseModel) -> str:
    """SHA-256 over the canonical JSON form of a configuration"""
    canonical = json.dumps(run_config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def dump_run_config(cfg: RunConfig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(run_config_to_dict(cfg), sort_keys=True), encoding="utf-8")
    return path


def window_length_for(view: ViewConfig, temporal_difference: bool = False) -> int:
    """Frames a pretraining window must hold for the configured two-view plan"""
    length = view.final_length
    d1, d2 = view.downsample_factors
    segments = 2 if temporal_difference else 1
    first = length * d1
    second = length * d2 * segments
    if view.offset_mode is OffsetMode.ZERO:
        return max(first, second)
    if view.offset_mode is OffsetMode.FIXED:
        return max(first, view.offset_frames + second)
    return first + second


def finetune_window_length(view: ViewConfig, finetune: FinetuneConfig) -> int:
    return finetune.views * view.final_length * finetune.downsample
