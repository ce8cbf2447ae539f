"""
Domain types
Enumerations shared by the run configuration and the records passed between services
"""
import enum
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple

import torch
from pydantic import BaseModel, Field

from app.exceptions import DatasetError


class DatasetSource(str, enum.Enum):
    SYNTHETIC = "synthetic"
    FRAME_DIR = "frame_dir"


class SplitName(str, enum.Enum):
    TRAIN = "train"
    TEST = "test"


class SyntheticMotion(str, enum.Enum):
    """Motion patterns that define synthetic classes"""
    DRIFT_LEFT = "drift_left"
    DRIFT_RIGHT = "drift_right"
    GROW = "grow"
    SHRINK = "shrink"
    DRIFT_UP = "drift_up"
    DRIFT_DOWN = "drift_down"
    OSCILLATE_X = "oscillate_x"
    OSCILLATE_Y = "oscillate_y"


class OffsetMode(str, enum.Enum):
    ZERO = "zero"
    FIXED = "fixed"
    DISJOINT = "disjoint"


class CropMode(str, enum.Enum):
    RANDOM = "random"
    CENTER = "center"
    FULL = "full"


class ColorMode(str, enum.Enum):
    JITTER_GRAY = "jitter_gray"
    LAB_DROPOUT = "lab_dropout"


class EncoderPreset(str, enum.Enum):
    FULL = "full"
    TINY = "tiny"


class BlockKind(str, enum.Enum):
    CONV_BLOCK = "conv_block"
    RES_BLOCK = "res_block"


class NegativeMode(str, enum.Enum):
    # denominator sums every consequent location of every batch sample
    ALL_LOCATIONS = "all_locations"
    # denominator sums only the fixed (i, i') pair across batch samples
    FIXED_PAIR = "fixed_pair"


class LossReduction(str, enum.Enum):
    SUM = "sum"
    MEAN = "mean"


class ClassifierInput(str, enum.Enum):
    PROJECTED = "projected"
    RAW = "raw"


class Precision(str, enum.Enum):
    FLOAT32 = "float32"
    FLOAT64 = "float64"

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self is Precision.FLOAT64 else torch.float32


# ---------------------------------------------------------------------------
# Video data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VideoClip:
    """
    Decoded frame sequence, frames laid out as (T, H, W, C) with values in [0, 1]
    """
    frames: torch.Tensor
    fps: float = 25.0
    label: Optional[int] = None
    source_id: str = ""

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError(
                f"VideoClip frames must be (T, H, W, 3), got {tuple(self.frames.shape)} [{self.source_id}]"
            )
        if self.frames.shape[1] < 1 or self.frames.shape[2] < 1:
            raise ValueError(f"VideoClip frames must have H, W >= 1 [{self.source_id}]")

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def height(self) -> int:
        return int(self.frames.shape[1])

    @property
    def width(self) -> int:
        return int(self.frames.shape[2])

    def validate(self) -> "VideoClip":
        """Check the full value contract; returns self so decoders can chain it"""
        if self.num_frames < 1:
            raise DatasetError("clip has no frames", reference=self.source_id)
        if not torch.isfinite(self.frames).all():
            raise DatasetError("clip contains non-finite values", reference=self.source_id)
        if self.frames.min() < 0.0 or self.frames.max() > 1.0:
            raise DatasetError("clip values outside [0, 1]", reference=self.source_id)
        return self

    def with_frames(self, frames: torch.Tensor) -> "VideoClip":
        return replace(self, frames=frames)


@dataclass(frozen=True)
class DatasetItem:
    reference: str
    label: int
    index: int = 0


@dataclass(frozen=True)
class DatasetSplit:
    """
    Immutable index of videos for one split; frames are produced lazily by `decoder`
    """
    items: Tuple[DatasetItem, ...]
    split_name: str
    class_count: int
    decoder: Callable[[DatasetItem], VideoClip] = field(compare=False, repr=False, default=None)

    def __post_init__(self):
        if self.split_name not in (SplitName.TRAIN.value, SplitName.TEST.value):
            raise ValueError(f"split_name must be 'train' or 'test', got '{self.split_name}'")
        if self.class_count < 1:
            raise ValueError(f"class_count must be positive, got {self.class_count}")
        for item in self.items:
            if not 0 <= item.label < self.class_count:
                raise DatasetError(
                    f"label {item.label} outside [0, {self.class_count})", reference=item.reference
                )

    def __len__(self) -> int:
        return len(self.items)

    def decode(self, index: int) -> VideoClip:
        if self.decoder is None:
            raise DatasetError(f"split '{self.split_name}' has no decoder attached")
        return self.decoder(self.items[index])

    def references(self) -> List[str]:
        return [item.reference for item in self.items]

    def labels(self) -> List[int]:
        return [item.label for item in self.items]


# ---------------------------------------------------------------------------
# Views
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentationDraw:
    """
    Concrete augmentation parameters shared by every frame of one view.
    Crop geometry is stored relative to the frame so a draw is independent of resolution.
    """
    crop_area: float = 1.0
    crop_log_ratio: float = 0.0
    crop_top: float = 0.0
    crop_left: float = 0.0
    rotation_quarter_turns: int = 0
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0
    grayscale: bool = False
    to_lab: bool = False
    lab_drop_channel: Optional[int] = None
    crop_full: bool = False

    def resolve_crop(self, height: int, width: int) -> Tuple[int, int, int, int]:
        """Pixel crop box (top, left, h, w) for a frame of the given size"""
        if self.crop_full:
            return 0, 0, height, width
        area = self.crop_area * height * width
        ratio = math.exp(self.crop_log_ratio)
        crop_w = min(width, max(1, int(round(math.sqrt(area * ratio)))))
        crop_h = min(height, max(1, int(round(math.sqrt(area / ratio)))))
        top = min(height - crop_h, int(round(self.crop_top * (height - crop_h))))
        left = min(width - crop_w, int(round(self.crop_left * (width - crop_w))))
        return top, left, crop_h, crop_w


@dataclass(frozen=True)
class ViewSpec:
    start_frame: int
    raw_length: int
    downsample: int
    segments: int = 1
    draw: Optional[AugmentationDraw] = None

    @property
    def end_frame(self) -> int:
        return self.start_frame + self.raw_length

    @property
    def final_length(self) -> int:
        return self.raw_length // self.downsample

    def frame_indices(self) -> List[int]:
        return list(range(self.start_frame, self.end_frame, self.downsample))


@dataclass(frozen=True)
class ViewPlan:
    views: Tuple[ViewSpec, ...]

    @property
    def required_length(self) -> int:
        return max(view.end_frame for view in self.views)

    @property
    def has_draws(self) -> bool:
        return all(view.draw is not None for view in self.views)


@dataclass
class ViewSet:
    """Augmented views, each (T', H', W', C), plus the plan that produced them"""
    views: List[torch.Tensor]
    plan: ViewPlan

    def __len__(self) -> int:
        return len(self.views)


# ---------------------------------------------------------------------------
# Features and scores
# ---------------------------------------------------------------------------

@dataclass
class FeaturePyramid:
    """Per-tap feature grids laid out as (B, C, T, X, Y)"""
    taps: Dict[int, torch.Tensor]

    def __getitem__(self, layer: int) -> torch.Tensor:
        return self.taps[layer]

    def __contains__(self, layer: int) -> bool:
        return layer in self.taps

    @property
    def layers(self) -> List[int]:
        return sorted(self.taps)

    def num_locations(self, layer: int) -> int:
        _, _, t, x, y = self.taps[layer].shape
        return t * x * y

    def flatten(self, layer: int) -> torch.Tensor:
        """(B, N, C) view of a tap, locations in (t, x, y) row-major order"""
        grid = self.taps[layer]
        return grid.flatten(start_dim=2).transpose(1, 2)


LayerPair = Tuple[int, int]


@dataclass
class ScoreTensor:
    """
    positives[(j, j')]: (B, N_j, N_j') scores between views of the same sample
    negatives[(j, j')]: (B, N_j, B, N_j') scores against every sample of the batch
    """
    positives: Dict[LayerPair, torch.Tensor] = field(default_factory=dict)
    negatives: Dict[LayerPair, torch.Tensor] = field(default_factory=dict)

    @property
    def pairs(self) -> List[LayerPair]:
        return sorted(self.positives)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

class VideoPrediction(BaseModel):
    reference: str
    label: int
    predicted: int
    probabilities: List[float]
    windows: int


class EvalReport(BaseModel):
    """Clip-level evaluation result, serialized as a JSON document"""
    split_name: str
    class_count: int
    samples_per_video: int
    video_accuracy: float = Field(ge=0.0, le=1.0)
    clip_accuracy: float = Field(ge=0.0, le=1.0)
    per_class_accuracy: Dict[int, float] = Field(default_factory=dict)
    predictions: List[VideoPrediction] = Field(default_factory=list)
    error_items: List[Dict[str, str]] = Field(default_factory=list)
    warning_count: int = 0
    config_hash: str = ""
    checkpoint_id: str = ""
