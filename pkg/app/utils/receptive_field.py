"""
Analytic receptive fields
Composes (kernel, stride, padding) per axis to find the input region a feature location sees
"""
from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple

Interval = Tuple[int, int]


@dataclass(frozen=True)
class AxisGeometry:
    kernel: int
    stride: int
    padding: int


@dataclass(frozen=True)
class AxisField:
    """Receptive field of location 0 along one axis, before clipping to the input"""
    jump: int
    size: int
    start: int

    def interval(self, index: int, extent: int) -> Interval:
        """Half-open input interval [lo, hi) seen by location `index`, clipped to [0, extent)"""
        lo = self.start + index * self.jump
        return max(lo, 0), min(lo + self.size, extent)


def compose(layers: Iterable[AxisGeometry]) -> AxisField:
    jump, size, start = 1, 1, 0
    for layer in layers:
        size += (layer.kernel - 1) * jump
        start -= layer.padding * jump
        jump *= layer.stride
    return AxisField(jump=jump, size=size, start=start)


def location_region(
    axes: Sequence[Sequence[AxisGeometry]],
    location: Sequence[int],
    extents: Sequence[int],
) -> Tuple[Interval, ...]:
    """Per-axis clipped input intervals for one output location"""
    if not len(axes) == len(location) == len(extents):
        raise ValueError(f"axes, location and extents must have equal length, got {len(axes)}, "
                         f"{len(location)}, {len(extents)}")
    return tuple(compose(layers).interval(index, extent)
                 for layers, index, extent in zip(axes, location, extents))
