"""
Spatio-temporal Encoder
R(2+1)D blocks assembled into an eight-block encoder with local and global feature taps
"""
import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn as nn

from app.config import EncoderConfig
from app.exceptions import EncoderShapeError
from app.models import BlockKind, EncoderPreset, FeaturePyramid
from app.utils.receptive_field import AxisGeometry, Interval, location_region

logger = logging.getLogger(__name__)

Shape = Tuple[int, int, int, int]


@dataclass(frozen=True)
class BlockSpec:
    """
    One encoder row. Kernels, strides and padding are given as spatial (k, s, pad)
    and temporal (kt, st, pad_t); `n` trailing 1x1x1 blocks follow a res_block.
    """
    kind: BlockKind
    k: int
    kt: int
    s: int
    st: int
    out_channels: int
    n: int = 0
    residual: bool = False
    pad: int = 0
    pad_t: int = 0

    def __post_init__(self):
        if min(self.k, self.kt, self.s, self.st, self.out_channels) < 1:
            raise ValueError(f"kernels, strides and channels must be >= 1: {self}")
        if self.n < 0 or self.pad < 0 or self.pad_t < 0:
            raise ValueError(f"n and padding must be >= 0: {self}")
        if self.kind is BlockKind.CONV_BLOCK and self.n:
            raise ValueError("conv_block has no trailing 1x1x1 blocks")

    @property
    def has_shortcut(self) -> bool:
        return self.kind is BlockKind.RES_BLOCK or self.residual

    def output_shape(self, shape: Shape) -> Shape:
        _, t, x, y = shape
        return (
            self.out_channels,
            (t + 2 * self.pad_t - self.kt) // self.st + 1,
            (x + 2 * self.pad - self.k) // self.s + 1,
            (y + 2 * self.pad - self.k) // self.s + 1,
        )


@dataclass(frozen=True)
class EncoderSpec:
    blocks: Tuple[BlockSpec, ...]
    input_shape: Shape
    expected_shapes: Tuple[Shape, ...]
    tap_layers: Tuple[int, ...] = (5, 6, 8)
    block_norm: bool = True
    output_norm: bool = True
    preset: str = EncoderPreset.FULL.value

    def __post_init__(self):
        if len(self.blocks) != len(self.expected_shapes):
            raise ValueError("every block needs an expected output shape")
        if not self.tap_layers or any(not 1 <= tap <= len(self.blocks) for tap in self.tap_layers):
            raise ValueError(f"tap layers must lie in 1..{len(self.blocks)}, got {self.tap_layers}")

    def shape_at(self, layer: int) -> Shape:
        return self.expected_shapes[layer - 1]

    def channels_at(self, layer: int) -> int:
        return self.expected_shapes[layer - 1][0]

    def to_dict(self) -> dict:
        """JSON-safe form stored in checkpoints"""
        data = asdict(self)
        for block in data["blocks"]:
            block["kind"] = block["kind"].value
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "EncoderSpec":
        return cls(
            blocks=tuple(BlockSpec(**{**block, "kind": BlockKind(block["kind"])}) for block in data["blocks"]),
            input_shape=tuple(data["input_shape"]),
            expected_shapes=tuple(tuple(shape) for shape in data["expected_shapes"]),
            tap_layers=tuple(data["tap_layers"]),
            block_norm=bool(data["block_norm"]),
            output_norm=bool(data["output_norm"]),
            preset=data["preset"],
        )


# Table of the full encoder at input 3x32x128x128 (C x T x X x Y). Strides of
# blocks 3-5 and padding of block 1 are inferred from the output sizes.
_FULL_BLOCKS = (
    BlockSpec(BlockKind.CONV_BLOCK, k=5, kt=5, s=2, st=2, out_channels=64, pad=2, pad_t=2),
    BlockSpec(BlockKind.CONV_BLOCK, k=3, kt=3, s=1, st=1, out_channels=64),
    BlockSpec(BlockKind.RES_BLOCK, k=4, kt=1, s=2, st=1, out_channels=128, n=3),
    BlockSpec(BlockKind.RES_BLOCK, k=4, kt=1, s=2, st=1, out_channels=256, n=3),
    BlockSpec(BlockKind.RES_BLOCK, k=2, kt=2, s=2, st=2, out_channels=512, n=3),
    BlockSpec(BlockKind.RES_BLOCK, k=3, kt=3, s=1, st=1, out_channels=512, n=3),
    BlockSpec(BlockKind.RES_BLOCK, k=3, kt=3, s=1, st=1, out_channels=512, n=3),
    BlockSpec(BlockKind.RES_BLOCK, k=3, kt=3, s=1, st=1, out_channels=512, n=0),
)
_FULL_SHAPES = (
    (64, 16, 64, 64),
    (64, 14, 62, 62),
    (128, 14, 30, 30),
    (256, 14, 14, 14),
    (512, 7, 7, 7),
    (512, 5, 5, 5),
    (512, 3, 3, 3),
    (512, 1, 1, 1),
)

# Reduced widths at input 3x16x64x64; same block types, taps 5 and 6 stay local.
_TINY_BLOCKS = (
    BlockSpec(BlockKind.CONV_BLOCK, k=5, kt=5, s=2, st=2, out_channels=8, pad=2, pad_t=2),
    BlockSpec(BlockKind.CONV_BLOCK, k=3, kt=3, s=1, st=1, out_channels=8),
    BlockSpec(BlockKind.RES_BLOCK, k=4, kt=1, s=2, st=1, out_channels=16, n=1),
    BlockSpec(BlockKind.RES_BLOCK, k=4, kt=1, s=2, st=1, out_channels=32, n=1),
    BlockSpec(BlockKind.RES_BLOCK, k=2, kt=2, s=1, st=1, out_channels=64, n=1),
    BlockSpec(BlockKind.RES_BLOCK, k=3, kt=3, s=1, st=1, out_channels=64, n=1),
    BlockSpec(BlockKind.RES_BLOCK, k=3, kt=3, s=1, st=1, out_channels=64, n=1),
    BlockSpec(BlockKind.RES_BLOCK, k=1, kt=1, s=1, st=1, out_channels=64, n=0),
)
_TINY_SHAPES = (
    (8, 8, 32, 32),
    (8, 6, 30, 30),
    (16, 6, 14, 14),
    (32, 6, 6, 6),
    (64, 5, 5, 5),
    (64, 3, 3, 3),
    (64, 1, 1, 1),
    (64, 1, 1, 1),
)


def full_encoder_spec(**overrides) -> EncoderSpec:
    return EncoderSpec(_FULL_BLOCKS, (3, 32, 128, 128), _FULL_SHAPES, preset=EncoderPreset.FULL.value, **overrides)


def tiny_encoder_spec(**overrides) -> EncoderSpec:
    return EncoderSpec(_TINY_BLOCKS, (3, 16, 64, 64), _TINY_SHAPES, preset=EncoderPreset.TINY.value, **overrides)


def encoder_spec_from_config(cfg: EncoderConfig) -> EncoderSpec:
    factory = full_encoder_spec if cfg.preset is EncoderPreset.FULL else tiny_encoder_spec
    return factory(tap_layers=tuple(cfg.tap_layers), block_norm=cfg.block_norm, output_norm=cfg.output_norm)


def mid_channels(in_channels: int, out_channels: int, k: int, kt: int) -> int:
    """Hidden width that keeps a (2+1)D block near the parameter count of a full 3D kernel"""
    value = kt * k * k * in_channels * out_channels
    value //= k * k * in_channels + kt * out_channels
    return max(int(value), 1)


# ---------------------------------------------------------------------------
# Modules
# ---------------------------------------------------------------------------

class Conv2Plus1D(nn.Module):
    """Spatial (1, k, k) convolution, norm, ReLU, temporal (kt, 1, 1) convolution"""

    def __init__(self, in_channels: int, out_channels: int, k: int, kt: int,
                 s: int = 1, st: int = 1, pad: int = 0, pad_t: int = 0, norm: bool = True):
        super().__init__()
        mid = mid_channels(in_channels, out_channels, k, kt)
        self.spatial_conv = nn.Conv3d(in_channels, mid, kernel_size=(1, k, k), stride=(1, s, s),
                                      padding=(0, pad, pad), bias=not norm)
        self.norm = nn.BatchNorm3d(mid) if norm else nn.Identity()
        self.relu = nn.ReLU(inplace=True)
        self.temporal_conv = nn.Conv3d(mid, out_channels, kernel_size=(kt, 1, 1), stride=(st, 1, 1),
                                       padding=(pad_t, 0, 0), bias=not norm)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.temporal_conv(self.relu(self.norm(self.spatial_conv(x))))


class R2Plus1DBlock(nn.Module):
    """
    Factorized convolution followed by norm, an optional shortcut and ReLU.
    The shortcut average-pools with the block's own kernel and stride so both paths
    see the same input region; a 1x1x1 convolution matches channels when needed.
    """

    def __init__(self, in_channels: int, out_channels: int, k: int, kt: int, s: int = 1, st: int = 1,
                 pad: int = 0, pad_t: int = 0, residual: bool = False, norm: bool = True):
        super().__init__()
        self.conv = Conv2Plus1D(in_channels, out_channels, k, kt, s, st, pad, pad_t, norm)
        self.norm = nn.BatchNorm3d(out_channels) if norm else nn.Identity()
        self.relu = nn.ReLU(inplace=True)
        self.shortcut: Optional[nn.Module] = None
        if residual:
            layers: List[nn.Module] = []
            if (k, kt, s, st) != (1, 1, 1, 1):
                layers.append(nn.AvgPool3d((kt, k, k), stride=(st, s, s), padding=(pad_t, pad, pad)))
            if in_channels != out_channels:
                layers.append(nn.Conv3d(in_channels, out_channels, kernel_size=1, bias=False))
            self.shortcut = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.norm(self.conv(x))
        if self.shortcut is not None:
            out = out + self.shortcut(x)
        return self.relu(out)


def build_block(block: BlockSpec, in_channels: int, norm: bool = True) -> nn.Module:
    head = R2Plus1DBlock(in_channels, block.out_channels, block.k, block.kt, block.s, block.st,
                         block.pad, block.pad_t, residual=block.has_shortcut, norm=norm)
    if block.kind is BlockKind.CONV_BLOCK:
        return head
    trailing = [R2Plus1DBlock(block.out_channels, block.out_channels, 1, 1, residual=True, norm=norm)
                for _ in range(block.n)]
    return nn.Sequential(head, *trailing)


def block_parameter_count(block: BlockSpec, in_channels: int, norm: bool = True) -> int:
    """Closed-form parameter count of one (2+1)D encoder block"""

    def unit(c_in: int, c_out: int, k: int, kt: int, shortcut: bool) -> int:
        mid = mid_channels(c_in, c_out, k, kt)
        count = mid * c_in * k * k + c_out * mid * kt
        count += 2 * (mid + c_out) if norm else mid + c_out
        if shortcut and c_in != c_out:
            count += c_in * c_out
        return count

    total = unit(in_channels, block.out_channels, block.k, block.kt, block.has_shortcut)
    if block.kind is BlockKind.RES_BLOCK:
        total += block.n * unit(block.out_channels, block.out_channels, 1, 1, True)
    return total


def full_3d_parameter_count(block: BlockSpec, in_channels: int) -> int:
    """Weights of one unfactorized kt x k x k convolution with the same extent"""
    return block.out_channels * in_channels * block.kt * block.k * block.k


class VideoEncoder(nn.Module):
    """
    Encoder over (B, C, T, X, Y) inputs returning a FeaturePyramid of the tap layers.
    Batch norm is applied to every tap output when `spec.output_norm` is set.
    """

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        blocks = []
        in_channels = spec.input_shape[0]
        for block in spec.blocks:
            blocks.append(build_block(block, in_channels, spec.block_norm))
            in_channels = block.out_channels
        self.blocks = nn.ModuleList(blocks)
        self.output_norms = nn.ModuleDict({
            str(tap): nn.BatchNorm3d(spec.channels_at(tap)) if spec.output_norm else nn.Identity()
            for tap in spec.tap_layers
        })

    @property
    def tap_layers(self) -> Tuple[int, ...]:
        return self.spec.tap_layers

    def forward_blocks(self, x: torch.Tensor, depth: Optional[int] = None) -> List[torch.Tensor]:
        """Raw outputs of blocks 1..depth"""
        depth = depth or len(self.blocks)
        outputs = []
        for block in self.blocks[:depth]:
            x = block(x)
            outputs.append(x)
        return outputs

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        if tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise EncoderShapeError(
                f"encoder expects input (B, {', '.join(map(str, self.spec.input_shape))}), got {tuple(x.shape)}"
            )
        outputs = self.forward_blocks(x, max(self.spec.tap_layers))
        return FeaturePyramid(taps={
            tap: self.output_norms[str(tap)](outputs[tap - 1]) for tap in self.spec.tap_layers
        })


def verify_shapes(encoder: VideoEncoder) -> None:
    """Run a probe input through every block and compare with the declared shapes"""
    spec = encoder.spec
    parameter = next(encoder.parameters())
    probe = torch.zeros((1, *spec.input_shape), dtype=parameter.dtype, device=parameter.device)
    was_training = encoder.training
    encoder.eval()
    try:
        with torch.no_grad():
            outputs = encoder.forward_blocks(probe)
    finally:
        encoder.train(was_training)

    for index, (output, expected) in enumerate(zip(outputs, spec.expected_shapes), start=1):
        realized = tuple(output.shape[1:])
        if realized != tuple(expected):
            raise EncoderShapeError(
                f"block {index}: expected output {expected}, realized {realized}", block_index=index
            )


def build_encoder(spec: EncoderSpec, check_shapes: bool = True) -> VideoEncoder:
    """
    Instantiate the encoder for `spec`; with check_shapes every block output is
    compared against spec.expected_shapes before the encoder is returned.
    """
    analytic = spec.input_shape
    for index, block in enumerate(spec.blocks, start=1):
        analytic = block.output_shape(analytic)
        if analytic != tuple(spec.expected_shapes[index - 1]):
            raise EncoderShapeError(
                f"block {index}: expected output {spec.expected_shapes[index - 1]}, "
                f"block arithmetic gives {analytic}",
                block_index=index,
            )

    taps = sorted(spec.tap_layers)
    locations = [_locations(spec.shape_at(tap)) for tap in taps]
    if any(later > earlier for earlier, later in zip(locations, locations[1:])):
        raise EncoderShapeError(f"tap grids must not grow with depth: {dict(zip(taps, locations))}")

    encoder = VideoEncoder(spec)
    if check_shapes:
        verify_shapes(encoder)
    parameters = sum(p.numel() for p in encoder.parameters())
    logger.info(f"✅ Built {spec.preset} encoder: taps {list(spec.tap_layers)}, {parameters:,} parameters")
    return encoder


def _locations(shape: Shape) -> int:
    return shape[1] * shape[2] * shape[3]


def encode(encoder: VideoEncoder, view: torch.Tensor) -> FeaturePyramid:
    """
    Encode a view laid out as (T, H, W, C) or (B, T, H, W, C).
    """
    if view.ndim == 4:
        view = view.unsqueeze(0)
    if view.ndim != 5:
        raise EncoderShapeError(f"view must be (T, H, W, C) or (B, T, H, W, C), got {tuple(view.shape)}")
    parameter = next(encoder.parameters())
    x = view.permute(0, 4, 1, 2, 3).to(dtype=parameter.dtype, device=parameter.device)
    return encoder(x.contiguous())


# ---------------------------------------------------------------------------
# Receptive fields
# ---------------------------------------------------------------------------

def _axis_geometry(spec: EncoderSpec, tap: int) -> Tuple[List[AxisGeometry], List[AxisGeometry]]:
    temporal, spatial = [], []
    for block in spec.blocks[:tap]:
        temporal.append(AxisGeometry(block.kt, block.st, block.pad_t))
        spatial.append(AxisGeometry(block.k, block.s, block.pad))
    return temporal, spatial


def receptive_field(spec: EncoderSpec, tap: int, location: Tuple[int, int, int]) -> Tuple[Interval, ...]:
    """
    Input region ((t0, t1), (x0, x1), (y0, y1)), half-open and clipped to the input,
    that can influence the tap feature at grid `location` = (t, x, y).
    Trailing 1x1x1 blocks and the pooled shortcut do not widen the region.
    """
    if tap not in spec.tap_layers:
        raise ValueError(f"layer {tap} is not a tap of this encoder (taps {spec.tap_layers})")
    _, t, x, y = spec.shape_at(tap)
    if not (0 <= location[0] < t and 0 <= location[1] < x and 0 <= location[2] < y):
        raise ValueError(f"location {location} outside the {t}x{x}x{y} grid of layer {tap}")
    temporal, spatial = _axis_geometry(spec, tap)
    _, in_t, in_x, in_y = spec.input_shape
    return location_region((temporal, spatial, spatial), location, (in_t, in_x, in_y))


def covers_input(spec: EncoderSpec, region: Tuple[Interval, ...]) -> bool:
    _, in_t, in_x, in_y = spec.input_shape
    return region == ((0, in_t), (0, in_x), (0, in_y))


def describe(spec: EncoderSpec) -> Dict[int, Dict[str, object]]:
    """Per-block summary used by the selfcheck report"""
    summary = {}
    in_channels = spec.input_shape[0]
    for index, block in enumerate(spec.blocks, start=1):
        summary[index] = {
            "kind": block.kind.value,
            "shape": spec.expected_shapes[index - 1],
            "parameters": block_parameter_count(block, in_channels, spec.block_norm),
        }
        in_channels = block.out_channels
    return summary
