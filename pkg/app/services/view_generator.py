"""
View Generator Service
Splits a window into subsequences, downsamples them by striding and applies
one augmentation draw per view
"""
import logging
import math
from typing import List, Optional

import torch
from torchvision.transforms import InterpolationMode
from torchvision.transforms.v2 import functional as TF

from app.config import ViewConfig, window_length_for
from app.exceptions import ViewPlanError
from app.models import (
    AugmentationDraw,
    ColorMode,
    CropMode,
    OffsetMode,
    VideoClip,
    ViewPlan,
    ViewSet,
    ViewSpec,
)
from app.services.video_io import sample_window
from app.utils.color import lab_to_rgb, rgb_to_lab  # noqa: F401  re-exported

logger = logging.getLogger(__name__)

__all__ = [
    "ViewGeneratorService",
    "apply_views",
    "draw_augmentation",
    "get_view_generator_service",
    "lab_to_rgb",
    "plan_clip_views",
    "plan_views",
    "rgb_to_lab",
]


def _uniform(rng: torch.Generator, low: float, high: float) -> float:
    return low + (high - low) * float(torch.rand((), generator=rng, dtype=torch.float64))


def _randint(rng: torch.Generator, high: int) -> int:
    return int(torch.randint(0, high, (), generator=rng))


def _spawn(rng: torch.Generator) -> torch.Generator:
    """Child generator so no RNG instance is shared between views"""
    return torch.Generator().manual_seed(int(torch.randint(0, 2 ** 62, (), generator=rng)))


def draw_augmentation(cfg: ViewConfig, rng: torch.Generator) -> AugmentationDraw:
    """
    Sample every augmentation parameter of one view.
    The same number of random values is consumed whatever the draw turns out to be.
    """
    area = _uniform(rng, *cfg.crop_scale)
    log_ratio = _uniform(rng, math.log(cfg.crop_ratio[0]), math.log(cfg.crop_ratio[1]))
    top = _uniform(rng, 0.0, 1.0)
    left = _uniform(rng, 0.0, 1.0)
    turns = cfg.rotation_angles[_randint(rng, len(cfg.rotation_angles))] // 90 % 4
    brightness = _uniform(rng, max(0.0, 1.0 - cfg.brightness), 1.0 + cfg.brightness)
    contrast = _uniform(rng, max(0.0, 1.0 - cfg.contrast), 1.0 + cfg.contrast)
    saturation = _uniform(rng, max(0.0, 1.0 - cfg.saturation), 1.0 + cfg.saturation)
    hue = _uniform(rng, -cfg.hue, cfg.hue)
    grayscale = _uniform(rng, 0.0, 1.0) < cfg.grayscale_p
    drop_channel = _randint(rng, 3)

    if cfg.crop_mode is CropMode.CENTER:
        area, log_ratio, top, left = cfg.crop_scale[1], 0.0, 0.5, 0.5
    crop_full = cfg.crop_mode is CropMode.FULL

    if cfg.color_mode is ColorMode.LAB_DROPOUT:
        return AugmentationDraw(
            crop_area=area,
            crop_log_ratio=log_ratio,
            crop_top=top,
            crop_left=left,
            rotation_quarter_turns=turns if cfg.rotation else 0,
            to_lab=True,
            lab_drop_channel=drop_channel,
            crop_full=crop_full,
        )
    return AugmentationDraw(
        crop_area=area,
        crop_log_ratio=log_ratio,
        crop_top=top,
        crop_left=left,
        rotation_quarter_turns=turns if cfg.rotation else 0,
        brightness=brightness,
        contrast=contrast,
        saturation=saturation,
        hue=hue,
        grayscale=grayscale,
        crop_full=crop_full,
    )


def plan_views(
    window_length: int,
    cfg: ViewConfig,
    rng: Optional[torch.Generator] = None,
    consequent_segments: int = 1,
) -> ViewPlan:
    """
    Place the two views inside a window and draw their augmentations.

    View 1 starts at frame 0 and spans final_length * d1 frames. View 2 starts at
    0 (zero), offset_frames (fixed) or right after view 1 (disjoint) and spans
    final_length * d2 * consequent_segments frames. Without `rng` the plan carries
    no draws and apply_views samples them.
    """
    length = cfg.final_length
    d1, d2 = cfg.downsample_factors
    first = ViewSpec(start_frame=0, raw_length=length * d1, downsample=d1)

    if cfg.offset_mode is OffsetMode.ZERO:
        second_start = 0
    elif cfg.offset_mode is OffsetMode.FIXED:
        second_start = cfg.offset_frames
    else:
        second_start = first.end_frame
    second = ViewSpec(
        start_frame=second_start,
        raw_length=length * d2 * consequent_segments,
        downsample=d2,
        segments=consequent_segments,
    )

    required = max(first.end_frame, second.end_frame)
    if window_length < required:
        raise ViewPlanError(
            f"view plan ({cfg.offset_mode.value}, d={cfg.downsample_factors}, L={length}) "
            f"requires a window of {required} frames, got {window_length}",
            required_length=required,
        )

    if rng is not None:
        first = _with_draw(first, draw_augmentation(cfg, _spawn(rng)))
        second = _with_draw(second, draw_augmentation(cfg, _spawn(rng)))
    return ViewPlan(views=(first, second))


def plan_clip_views(
    views: int,
    cfg: ViewConfig,
    downsample: int = 1,
    rng: Optional[torch.Generator] = None,
) -> ViewPlan:
    """
    K consecutive views at offsets 0, L*d, 2*L*d, ... sharing one augmentation draw
    so every view sees the same crop of the scene.
    """
    if views < 1:
        raise ViewPlanError(f"need at least one view, got {views}")
    raw = cfg.final_length * downsample
    draw = draw_augmentation(cfg, _spawn(rng)) if rng is not None else None
    return ViewPlan(views=tuple(
        ViewSpec(start_frame=k * raw, raw_length=raw, downsample=downsample, draw=draw)
        for k in range(views)
    ))


def _with_draw(view: ViewSpec, draw: AugmentationDraw) -> ViewSpec:
    return ViewSpec(view.start_frame, view.raw_length, view.downsample, view.segments, draw)


def _augment(frames: torch.Tensor, draw: AugmentationDraw, cfg: ViewConfig) -> torch.Tensor:
    """(T, H, W, C) -> (T, S, S, C) with one draw applied to every frame"""
    x = frames.permute(0, 3, 1, 2)
    height, width = x.shape[-2:]

    top, left, crop_h, crop_w = draw.resolve_crop(height, width)
    x = x[..., top:top + crop_h, left:left + crop_w]
    if (crop_h, crop_w) != (cfg.crop_size, cfg.crop_size):
        x = TF.resize(x, [cfg.crop_size, cfg.crop_size], interpolation=InterpolationMode.BILINEAR, antialias=True)

    if draw.rotation_quarter_turns:
        x = torch.rot90(x, draw.rotation_quarter_turns, dims=(-2, -1))

    if draw.to_lab:
        lab = rgb_to_lab(x.permute(0, 2, 3, 1).clamp(0.0, 1.0), rescale=True)
        if draw.lab_drop_channel is not None:
            lab[..., draw.lab_drop_channel] = 0.0
        return lab.contiguous()

    if draw.brightness != 1.0:
        x = TF.adjust_brightness(x, draw.brightness)
    if draw.contrast != 1.0:
        x = TF.adjust_contrast(x, draw.contrast)
    if draw.saturation != 1.0:
        x = TF.adjust_saturation(x, draw.saturation)
    if draw.hue != 0.0:
        x = TF.adjust_hue(x, draw.hue)
    if draw.grayscale:
        x = TF.rgb_to_grayscale(x, num_output_channels=3)
    return x.clamp(0.0, 1.0).permute(0, 2, 3, 1).contiguous()


def apply_views(
    clip: VideoClip,
    plan: ViewPlan,
    cfg: ViewConfig,
    rng: Optional[torch.Generator] = None,
) -> ViewSet:
    """
    Extract, stride and augment every view of a plan.
    Order is fixed: resized crop, rotation, color transform.
    """
    if clip.num_frames < plan.required_length:
        raise ViewPlanError(
            f"[{clip.source_id}] clip has {clip.num_frames} frames, plan needs {plan.required_length}",
            required_length=plan.required_length,
        )
    if not plan.has_draws and rng is None:
        raise ViewPlanError("plan carries no augmentation draws and no rng was given")

    views: List[torch.Tensor] = []
    specs: List[ViewSpec] = []
    for view in plan.views:
        draw = view.draw if view.draw is not None else draw_augmentation(cfg, _spawn(rng))
        frames = clip.frames[view.start_frame:view.end_frame:view.downsample]
        views.append(_augment(frames, draw, cfg))
        specs.append(_with_draw(view, draw))
    return ViewSet(views=views, plan=ViewPlan(views=tuple(specs)))


class ViewGeneratorService:
    """
    Draws view operators for a clip: window sampling, planning and augmentation
    """

    def __init__(self, config: ViewConfig, temporal_difference: bool = False):
        self.config = config
        self.consequent_segments = 2 if temporal_difference else 1
        self.window_length = window_length_for(config, temporal_difference)

    def generate(self, clip: VideoClip, rng: torch.Generator) -> ViewSet:
        window = sample_window(clip, self.window_length, rng)
        plan = plan_views(self.window_length, self.config, rng, self.consequent_segments)
        return apply_views(window, plan, self.config)

    def clip_views(self, clip: VideoClip, views: int, downsample: int,
                   rng: Optional[torch.Generator] = None) -> ViewSet:
        """K consecutive views; without rng the configured recipe is applied deterministically"""
        plan = plan_clip_views(views, self.config, downsample, rng)
        if rng is None:
            plan = ViewPlan(views=tuple(
                _with_draw(view, _deterministic_draw(self.config)) for view in plan.views
            ))
        return apply_views(clip, plan, self.config)


def _deterministic_draw(cfg: ViewConfig) -> AugmentationDraw:
    """Evaluation draw: center or full crop, Lab conversion kept, nothing dropped"""
    return AugmentationDraw(
        crop_area=cfg.crop_scale[1],
        crop_top=0.5,
        crop_left=0.5,
        crop_full=cfg.crop_mode is CropMode.FULL,
        to_lab=cfg.color_mode is ColorMode.LAB_DROPOUT,
    )


def get_view_generator_service(config: ViewConfig, temporal_difference: bool = False) -> ViewGeneratorService:
    return ViewGeneratorService(config, temporal_difference)
