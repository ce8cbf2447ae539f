"""
sRGB <-> CIELAB conversion (D65 white point)
Tensors are channel-last (..., 3); Lab output can be rescaled to [0, 1] per channel
"""
import logging

import torch

logger = logging.getLogger(__name__)

# D65 reference white
WHITE_POINT = (0.95047, 1.0, 1.08883)

_RGB_TO_XYZ = (
    (0.4124564, 0.3575761, 0.1804375),
    (0.2126729, 0.7151522, 0.0721750),
    (0.0193339, 0.1191920, 0.9503041),
)

_DELTA = 6.0 / 29.0

# Rescaled Lab: L / 100, (a + 128) / 255, (b + 128) / 255
LAB_OFFSET = (0.0, 128.0, 128.0)
LAB_SCALE = (100.0, 255.0, 255.0)

_range_warning_emitted = False


def _matrix(values, like: torch.Tensor) -> torch.Tensor:
    return torch.tensor(values, dtype=like.dtype, device=like.device)


def _srgb_to_linear(rgb: torch.Tensor) -> torch.Tensor:
    return torch.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(linear: torch.Tensor) -> torch.Tensor:
    linear = linear.clamp(min=0.0)
    return torch.where(linear <= 0.0031308, linear * 12.92, 1.055 * linear ** (1.0 / 2.4) - 0.055)


def _f(t: torch.Tensor) -> torch.Tensor:
    return torch.where(t > _DELTA ** 3, t.clamp(min=_DELTA ** 3) ** (1.0 / 3.0), t / (3 * _DELTA ** 2) + 4.0 / 29.0)


def _f_inverse(t: torch.Tensor) -> torch.Tensor:
    return torch.where(t > _DELTA, t ** 3, 3 * _DELTA ** 2 * (t - 4.0 / 29.0))


def _clamp_unit(rgb: torch.Tensor) -> torch.Tensor:
    global _range_warning_emitted
    if rgb.numel() and (rgb.min() < 0.0 or rgb.max() > 1.0):
        if not _range_warning_emitted:
            logger.warning("⚠️ rgb_to_lab received values outside [0, 1]; clamping (reported once per run)")
            _range_warning_emitted = True
        return rgb.clamp(0.0, 1.0)
    return rgb


def rgb_to_lab(rgb: torch.Tensor, rescale: bool = False) -> torch.Tensor:
    """
    Convert sRGB in [0, 1] to CIELAB.

    Unscaled output has L in [0, 100] and a, b roughly in [-128, 127]. With
    rescale=True each channel is mapped through (value + LAB_OFFSET) / LAB_SCALE.
    """
    if rgb.shape[-1] != 3:
        raise ValueError(f"rgb_to_lab: input must have last dimension 3, got {rgb.shape[-1]}")
    rgb = _clamp_unit(rgb)
    linear = _srgb_to_linear(rgb)
    xyz = linear @ _matrix(_RGB_TO_XYZ, linear).T
    xyz = xyz / _matrix(WHITE_POINT, xyz)
    fx, fy, fz = _f(xyz[..., 0]), _f(xyz[..., 1]), _f(xyz[..., 2])
    lab = torch.stack((116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)), dim=-1)
    if rescale:
        lab = (lab + _matrix(LAB_OFFSET, lab)) / _matrix(LAB_SCALE, lab)
    return lab


def lab_to_rgb(lab: torch.Tensor, rescaled: bool = False) -> torch.Tensor:
    """Inverse of rgb_to_lab; out-of-gamut colors are not clamped"""
    if lab.shape[-1] != 3:
        raise ValueError(f"lab_to_rgb: input must have last dimension 3, got {lab.shape[-1]}")
    if rescaled:
        lab = lab * _matrix(LAB_SCALE, lab) - _matrix(LAB_OFFSET, lab)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = lab[..., 1] / 500.0 + fy
    fz = fy - lab[..., 2] / 200.0
    xyz = torch.stack((_f_inverse(fx), _f_inverse(fy), _f_inverse(fz)), dim=-1)
    xyz = xyz * _matrix(WHITE_POINT, xyz)
    linear = xyz @ torch.linalg.inv(_matrix(_RGB_TO_XYZ, xyz)).T
    return _linear_to_srgb(linear)


def reset_range_warning() -> None:
    global _range_warning_emitted
    _range_warning_emitted = False
