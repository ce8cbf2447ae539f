"""
Video Ingestion Service
Clip windowing, the synthetic motion dataset and the frame-directory loader
"""
import logging
import math
import re
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from app.config import DatasetConfig, SyntheticMotionSpec
from app.exceptions import DatasetError, EmptyClipError, FrameDecodeError, ManifestError
from app.models import (
    DatasetItem,
    DatasetSource,
    DatasetSplit,
    SplitName,
    SyntheticMotion,
    VideoClip,
)

logger = logging.getLogger(__name__)

FRAME_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}
MANIFEST_NAME = "manifest.tsv"

# oscillating classes: amplitude as a fraction of the frame, period in frames
OSCILLATION_AMPLITUDE = 1.0 / 6.0
OSCILLATION_PERIOD = 24.0


# ---------------------------------------------------------------------------
# Windowing
# ---------------------------------------------------------------------------

def sample_window(clip: VideoClip, window_length: int, rng: torch.Generator) -> VideoClip:
    """
    Draw a contiguous window of exactly `window_length` frames at a uniform start.
    Clips shorter than the window are filled by repeating their last frame.
    """
    if window_length < 1:
        raise ValueError(f"window_length must be >= 1, got {window_length}")
    if clip.num_frames == 0:
        raise EmptyClipError("cannot sample a window from an empty clip", reference=clip.source_id)

    if clip.num_frames <= window_length:
        return clip.with_frames(pad_to_length(clip.frames, window_length))

    start = int(torch.randint(0, clip.num_frames - window_length + 1, (1,), generator=rng).item())
    return clip.with_frames(clip.frames[start:start + window_length])


def pad_to_length(frames: torch.Tensor, length: int) -> torch.Tensor:
    """Truncate or fill with copies of the last frame to exactly `length` frames"""
    if frames.shape[0] >= length:
        return frames[:length]
    filler = frames[-1:].expand(length - frames.shape[0], *frames.shape[1:])
    return torch.cat([frames, filler], dim=0)


def window_starts(num_frames: int, window_length: int, count: int) -> List[int]:
    """`count` evenly spaced window starts covering the clip"""
    last = max(num_frames - window_length, 0)
    if count == 1 or last == 0:
        return [0] * count if last == 0 else [last // 2]
    return [int(round(i * last / (count - 1))) for i in range(count)]


def resize_frames(frames: torch.Tensor, size: Optional[Tuple[int, int]]) -> torch.Tensor:
    """Bilinear antialiased resize of (T, H, W, C) frames"""
    if size is None or tuple(frames.shape[1:3]) == tuple(size):
        return frames
    channels_first = frames.permute(0, 3, 1, 2)
    resized = F.interpolate(channels_first, size=tuple(size), mode="bilinear", align_corners=False, antialias=True)
    return resized.clamp(0.0, 1.0).permute(0, 2, 3, 1).contiguous()


# ---------------------------------------------------------------------------
# Synthetic motion dataset
# ---------------------------------------------------------------------------

class SyntheticMotionRenderer:
    """
    Renders a colored square moving over a static textured background.
    Only the motion depends on the class; color, size, start position and
    background are drawn independently of it.
    """

    def __init__(self, spec: SyntheticMotionSpec):
        self.spec = spec
        self.height, self.width = spec.resolution

    def render(self, motion: SyntheticMotion, rng: np.random.Generator) -> np.ndarray:
        spec = self.spec
        h, w = self.height, self.width
        length = spec.clip_length
        low, high = spec.size_range

        background = self._background(rng)
        color = 0.05 + 0.9 * rng.random(3)
        size = rng.uniform(low, high)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        speed = spec.speed * rng.uniform(0.75, 1.25)
        phase = rng.uniform(0.0, 2.0 * math.pi)

        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        frames = np.repeat(background[None], length, axis=0)
        growth = (high - low) / max(length - 1, 1)

        for t in range(length):
            y, x, s = cy, cx, size
            if motion is SyntheticMotion.DRIFT_LEFT:
                x = cx - speed * t
            elif motion is SyntheticMotion.DRIFT_RIGHT:
                x = cx + speed * t
            elif motion is SyntheticMotion.DRIFT_UP:
                y = cy - speed * t
            elif motion is SyntheticMotion.DRIFT_DOWN:
                y = cy + speed * t
            elif motion is SyntheticMotion.GROW:
                s = low + growth * t
            elif motion is SyntheticMotion.SHRINK:
                s = high - growth * t
            elif motion is SyntheticMotion.OSCILLATE_X:
                x = cx + OSCILLATION_AMPLITUDE * w * math.sin(2 * math.pi * t / OSCILLATION_PERIOD + phase)
            elif motion is SyntheticMotion.OSCILLATE_Y:
                y = cy + OSCILLATION_AMPLITUDE * h * math.sin(2 * math.pi * t / OSCILLATION_PERIOD + phase)

            # toroidal offsets: the square wraps around the frame border
            dy = (yy - y + h / 2) % h - h / 2
            dx = (xx - x + w / 2) % w - w / 2
            mask = (np.abs(dy) <= s / 2) & (np.abs(dx) <= s / 2)
            frames[t][mask] = color

        return frames.astype(np.float32)

    def _background(self, rng: np.random.Generator) -> np.ndarray:
        h, w = self.height, self.width
        cell = 8
        coarse = rng.random((h // cell + 1, w // cell + 1, 3))
        smooth = np.repeat(np.repeat(coarse, cell, axis=0), cell, axis=1)[:h, :w]
        fine = rng.random((h, w, 3))
        return 0.2 + 0.4 * smooth + 0.15 * fine


def _motion_for_class(index: int) -> SyntheticMotion:
    return list(SyntheticMotion)[index]


class SyntheticDecoder:
    """Decodes a synthetic item; a pure function of (spec, item)"""

    def __init__(self, spec: SyntheticMotionSpec, frame_size: Optional[Tuple[int, int]] = None):
        self.spec = spec
        self.frame_size = frame_size
        self.renderer = SyntheticMotionRenderer(spec)

    def __call__(self, item: DatasetItem) -> VideoClip:
        motion = SyntheticMotion(item.reference.split("/")[1])
        rng = np.random.default_rng(np.random.SeedSequence(entropy=self.spec.seed, spawn_key=(item.index,)))
        frames = torch.from_numpy(self.renderer.render(motion, rng))
        frames = resize_frames(frames, self.frame_size)
        return VideoClip(frames=frames, fps=self.spec.fps, label=item.label, source_id=item.reference)


def generate_synthetic_dataset(
    spec: SyntheticMotionSpec,
    frame_size: Optional[Tuple[int, int]] = None,
) -> Tuple[DatasetSplit, DatasetSplit]:
    """
    Build balanced train/test splits of the synthetic motion dataset.
    Frames are rendered lazily and deterministically from (spec.seed, video index).
    """
    if spec.class_count < 1:
        raise DatasetError("synthetic dataset needs at least one class")
    if spec.clips_per_class < 1:
        raise DatasetError("synthetic dataset needs at least one clip per class")

    train_per_class = min(max(int(round(spec.train_fraction * spec.clips_per_class)), 1), spec.clips_per_class)
    permutation = spec.class_permutation or tuple(range(spec.class_count))

    train_items: List[DatasetItem] = []
    test_items: List[DatasetItem] = []
    for class_index in range(spec.class_count):
        motion = _motion_for_class(class_index)
        for n in range(spec.clips_per_class):
            video_index = class_index * spec.clips_per_class + n
            item = DatasetItem(
                reference=f"synthetic/{motion.value}/{n:04d}",
                label=int(permutation[class_index]),
                index=video_index,
            )
            (train_items if n < train_per_class else test_items).append(item)

    decoder = SyntheticDecoder(spec, frame_size)
    train = DatasetSplit(tuple(train_items), SplitName.TRAIN.value, spec.class_count, decoder)
    test = DatasetSplit(tuple(test_items), SplitName.TEST.value, spec.class_count, decoder)
    logger.info(
        f"Synthetic dataset: {spec.class_count} classes, {len(train)} train / {len(test)} test videos "
        f"(seed={spec.seed})"
    )
    return train, test


# ---------------------------------------------------------------------------
# Frame-directory datasets
# ---------------------------------------------------------------------------

def _frame_sort_key(path: Path) -> Tuple[int, str]:
    digits = re.findall(r"\d+", path.stem)
    return (int(digits[-1]) if digits else -1, path.name)


def list_frames(directory: Path) -> List[Path]:
    frames = [p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in FRAME_SUFFIXES]
    return sorted(frames, key=_frame_sort_key)


class FrameDirectoryDecoder:
    """Reads numerically ordered frame images of one video directory"""

    def __init__(self, root: Path, frame_size: Optional[Tuple[int, int]] = None, fps: float = 25.0):
        self.root = Path(root)
        self.frame_size = frame_size
        self.fps = fps

    def __call__(self, item: DatasetItem) -> VideoClip:
        directory = self.root / item.reference
        if not directory.is_dir():
            raise FrameDecodeError(f"missing frame directory {directory}", reference=item.reference)
        paths = list_frames(directory)
        if not paths:
            raise FrameDecodeError(f"no frame images in {directory}", reference=item.reference)

        frames = []
        for path in paths:
            try:
                with Image.open(path) as image:
                    array = np.asarray(image.convert("RGB"), dtype=np.float32) / 255.0
            except Exception as e:
                raise FrameDecodeError(f"unreadable frame {path}: {e}", reference=item.reference) from e
            if frames and array.shape != frames[0].shape:
                raise FrameDecodeError(
                    f"frame {path} has shape {array.shape}, expected {frames[0].shape}", reference=item.reference
                )
            frames.append(array)

        tensor = resize_frames(torch.from_numpy(np.stack(frames)), self.frame_size)
        return VideoClip(frames=tensor, fps=self.fps, label=item.label, source_id=item.reference)


def read_manifest(manifest: Path) -> List[Tuple[int, str, int, str]]:
    """Parse `relative_path<TAB>label<TAB>split` lines into (line_no, path, label, split)"""
    manifest = Path(manifest)
    if not manifest.is_file():
        raise ManifestError(f"manifest not found: {manifest}")

    entries = []
    for line_no, raw in enumerate(manifest.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ManifestError(f"{manifest}:{line_no}: expected 3 tab-separated fields, got {len(parts)}")
        relative, label_text, split = parts
        try:
            label = int(label_text)
        except ValueError:
            raise ManifestError(f"{manifest}:{line_no}: label '{label_text}' is not an integer", reference=relative)
        if split not in (SplitName.TRAIN.value, SplitName.TEST.value):
            raise ManifestError(f"{manifest}:{line_no}: split '{split}' must be train or test", reference=relative)
        entries.append((line_no, relative, label, split))
    return entries


def load_frame_directory_dataset(
    root: Path,
    manifest: Path,
    split: str = SplitName.TRAIN.value,
    class_count: Optional[int] = None,
    frame_size: Optional[Tuple[int, int]] = None,
    fps: float = 25.0,
) -> DatasetSplit:
    """
    Index a frame-directory dataset split. Frames are decoded lazily; missing
    directories and out-of-range labels are reported per item up front.
    """
    root = Path(root)
    entries = read_manifest(manifest)
    if class_count is None:
        class_count = max((label for _, _, label, _ in entries), default=-1) + 1
    if class_count < 1:
        raise ManifestError(f"manifest {manifest} lists no labelled videos")

    problems: List[str] = []
    references: Dict[str, str] = {}
    items: List[DatasetItem] = []
    for line_no, relative, label, item_split in entries:
        if relative in references and references[relative] != item_split:
            problems.append(f"[{relative}] line {line_no}: listed in both train and test")
        references[relative] = item_split
        if not 0 <= label < class_count:
            problems.append(f"[{relative}] line {line_no}: label {label} outside [0, {class_count})")
        if not (root / relative).is_dir():
            problems.append(f"[{relative}] line {line_no}: missing directory {root / relative}")
        if item_split == split:
            items.append(DatasetItem(reference=relative, label=label, index=len(items)))

    if problems:
        for problem in problems:
            logger.error(f"   • {problem}")
        raise ManifestError(f"{len(problems)} invalid manifest item(s):\n" + "\n".join(problems))

    decoder = FrameDirectoryDecoder(root, frame_size, fps)
    logger.info(f"Frame-directory dataset '{split}': {len(items)} videos, {class_count} classes from {root}")
    return DatasetSplit(tuple(items), split, class_count, decoder)


def export_frame_directory(splits: Sequence[DatasetSplit], root: Path) -> Path:
    """Write splits as frame images plus a manifest; returns the manifest path"""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for split in splits:
        for index, item in enumerate(split.items):
            relative = f"{split.split_name}/{item.reference}"
            directory = root / relative
            directory.mkdir(parents=True, exist_ok=True)
            clip = split.decode(index)
            pixels = (clip.frames.clamp(0.0, 1.0) * 255.0).round().to(torch.uint8).numpy()
            for t, frame in enumerate(pixels):
                Image.fromarray(frame).save(directory / f"{t:05d}.png")
            lines.append(f"{relative}\t{item.label}\t{split.split_name}")
        logger.info(f"Exported {len(split)} '{split.split_name}' videos to {root}")

    manifest = root / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


# ---------------------------------------------------------------------------
# Service
# ---------------------------------------------------------------------------

class VideoIOService:
    """
    Service to build the train/test splits described by a dataset configuration
    """

    def __init__(self, config: DatasetConfig):
        self.config = config

    def load_splits(self) -> Tuple[DatasetSplit, DatasetSplit]:
        cfg = self.config
        if cfg.source is DatasetSource.SYNTHETIC:
            return generate_synthetic_dataset(cfg.synthetic, cfg.frame_size)

        if cfg.root is None:
            raise DatasetError("frame_dir datasets need dataset.root")
        manifest = cfg.manifest if cfg.manifest is not None else Path(cfg.root) / MANIFEST_NAME
        train = load_frame_directory_dataset(
            cfg.root, manifest, SplitName.TRAIN.value, cfg.class_count, cfg.frame_size
        )
        test = load_frame_directory_dataset(
            cfg.root, manifest, SplitName.TEST.value, train.class_count, cfg.frame_size
        )
        return train, test

    def load_split(self, split: str) -> DatasetSplit:
        train, test = self.load_splits()
        return train if split == SplitName.TRAIN.value else test


def get_video_io_service(config: DatasetConfig) -> VideoIOService:
    return VideoIOService(config)
