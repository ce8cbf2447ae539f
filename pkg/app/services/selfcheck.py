"""
Self Check
Fast invariant suite run by `vdim selfcheck` and by the test suite: encoder shapes,
the infoNCE oracle and bound, receptive-field locality, Lab round trip, view arithmetic
"""
import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import torch

from app.config import ViewConfig
from app.exceptions import ConfigurationError
from app.models import FeaturePyramid, NegativeMode, OffsetMode
from app.services.encoder import (
    VideoEncoder,
    block_parameter_count,
    build_block,
    build_encoder,
    full_encoder_spec,
    receptive_field,
    tiny_encoder_spec,
)
from app.services.infomax import compute_scores, infonce, scalar_infonce_loss
from app.services.view_generator import plan_views
from app.utils.color import lab_to_rgb, rgb_to_lab

logger = logging.getLogger(__name__)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0


def check_encoder_shapes() -> str:
    """Full encoder at 3x32x128x128 realizes every declared block shape"""
    spec = full_encoder_spec()
    build_encoder(spec, check_shapes=True)
    return f"8 blocks, block 5 {spec.shape_at(5)}, block 8 {spec.shape_at(8)}"


def check_parameter_formula() -> str:
    spec = tiny_encoder_spec()
    in_channels = spec.input_shape[0]
    for index, block in enumerate(spec.blocks, start=1):
        module = build_block(block, in_channels, spec.block_norm)
        actual = sum(p.numel() for p in module.parameters())
        expected = block_parameter_count(block, in_channels, spec.block_norm)
        if actual != expected:
            raise AssertionError(f"block {index}: {actual} parameters, formula gives {expected}")
        in_channels = block.out_channels
    return f"{len(spec.blocks)} blocks match the closed form"


def _random_pyramid(generator: torch.Generator, batch: int, dim: int, grids: Dict[int, Sequence[int]]) -> FeaturePyramid:
    return FeaturePyramid(taps={
        layer: torch.randn((batch, dim, *grid), generator=generator, dtype=torch.float64)
        for layer, grid in grids.items()
    })


def _nested(pyramid: FeaturePyramid) -> Dict[int, List[List[List[float]]]]:
    return {layer: pyramid.flatten(layer).tolist() for layer in pyramid.layers}


def check_infonce_oracle(trials: int = 5, tolerance: float = 1e-6) -> str:
    """Vectorized loss agrees with the plain-loop evaluation in both negative modes"""
    generator = torch.Generator().manual_seed(7)
    pairs = [(5, 8), (6, 8), (8, 5), (8, 6)]
    worst = 0.0
    for trial in range(trials):
        batch = 2 + trial % 2
        first = _random_pyramid(generator, batch, 4, {5: (2, 2, 2), 6: (1, 2, 2), 8: (1, 1, 1)})
        second = _random_pyramid(generator, batch, 4, {5: (2, 2, 2), 6: (1, 2, 2), 8: (1, 1, 1)})
        for mode in NegativeMode:
            result = infonce(compute_scores(first, second, pairs), pairs, mode)
            oracle = scalar_infonce_loss(_nested(first), _nested(second), pairs, mode)
            error = abs(float(result.loss) - oracle)
            worst = max(worst, error)
            if error > tolerance:
                raise AssertionError(f"trial {trial}, {mode.value}: loss {float(result.loss)} vs oracle {oracle}")
    return f"max deviation {worst:.2e} over {trials} trials"


def check_infonce_bound(trials: int = 200) -> str:
    """Every estimate is at most log M; all-equal scores give exactly -log M"""
    generator = torch.Generator().manual_seed(11)
    for trial in range(trials):
        batch, locations = 2 + trial % 3, 1 + trial % 4
        first = _random_pyramid(generator, batch, 3, {8: (1, 1, locations)})
        second = _random_pyramid(generator, batch, 3, {8: (1, locations, 1)})
        scale = 0.1 + 10.0 * (trial / trials)
        first.taps[8] = first.taps[8] * scale
        result = infonce(compute_scores(first, second, [(8, 8)]), [(8, 8)])
        log_m = math.log(result.denominator_terms[(8, 8)])
        if float(result.estimates[(8, 8)].max()) > log_m + 1e-9:
            raise AssertionError(f"trial {trial}: estimate above log M = {log_m:.4f}")

    constant = FeaturePyramid(taps={8: torch.zeros((3, 2, 1, 2, 2), dtype=torch.float64)})
    result = infonce(compute_scores(constant, constant, [(8, 8)]), [(8, 8)])
    expected = -math.log(result.denominator_terms[(8, 8)])
    deviation = float((result.estimates[(8, 8)] - expected).abs().max())
    if deviation > 1e-6:
        raise AssertionError(f"all-equal scores deviate from -log M by {deviation}")
    return f"{trials} random score sets within log M"


def check_receptive_field(probes: int = 20, layers: Sequence[int] = (5, 6)) -> str:
    """Inputs outside a location's receptive field leave that feature bit-identical"""
    spec = tiny_encoder_spec()
    encoder = VideoEncoder(spec).double().eval()
    generator = torch.Generator().manual_seed(3)
    base = torch.rand((1, *spec.input_shape), generator=generator, dtype=torch.float64)
    with torch.no_grad():
        reference = encoder(base)

    checked = 0
    for probe in range(probes):
        layer = layers[probe % len(layers)]
        _, t, x, y = spec.shape_at(layer)
        location = tuple(int(torch.randint(0, n, (1,), generator=generator)) for n in (t, x, y))
        (t0, t1), (x0, x1), (y0, y1) = receptive_field(spec, layer, location)
        outside = torch.ones(spec.input_shape[1:], dtype=torch.bool)
        outside[t0:t1, x0:x1, y0:y1] = False
        if not outside.any():
            continue
        noise = torch.randn(base.shape, generator=generator, dtype=torch.float64)
        perturbed = base + noise * outside.to(base.dtype)
        with torch.no_grad():
            changed = encoder(perturbed)
        before = reference[layer][0, :, location[0], location[1], location[2]]
        after = changed[layer][0, :, location[0], location[1], location[2]]
        if not torch.equal(before, after):
            raise AssertionError(f"layer {layer} location {location}: feature moved by "
                                 f"{float((after - before).abs().max()):.3e} under outside perturbation")
        checked += 1
    if not checked:
        raise AssertionError(f"no probe location of layers {list(layers)} has input outside its field")
    return f"{checked} probes unchanged outside their fields"


def check_lab_round_trip(tolerance: float = 1e-4) -> str:
    generator = torch.Generator().manual_seed(5)
    rgb = torch.rand((4096, 3), generator=generator, dtype=torch.float64)
    error = float((lab_to_rgb(rgb_to_lab(rgb)) - rgb).abs().max())
    if error > tolerance:
        raise AssertionError(f"round trip error {error:.2e} above {tolerance}")
    white = rgb_to_lab(torch.ones(3, dtype=torch.float64))
    if abs(float(white[0]) - 100.0) > 1e-3 or float(white[1:].abs().max()) > 1e-3:
        raise AssertionError(f"white maps to {white.tolist()}, expected (100, 0, 0)")
    return f"max error {error:.2e}"


def check_view_arithmetic() -> str:
    """Disjoint split gives d1 / (d1 + d2) of the window to the first view; both views end at L frames"""
    checked = 0
    for length in (8, 16, 32):
        for d1 in (1, 2, 3):
            for d2 in (1, 2, 3):
                cfg = ViewConfig(final_length=length, downsample_factors=(d1, d2), offset_mode=OffsetMode.DISJOINT)
                window = length * (d1 + d2)
                first, second = plan_views(window, cfg).views
                if first.raw_length * (d1 + d2) != window * d1 or second.end_frame != window:
                    raise AssertionError(f"L={length}, d=({d1},{d2}): split {first.raw_length}/{second.raw_length}")
                if len(first.frame_indices()) != length or len(second.frame_indices()) != length:
                    raise AssertionError(f"L={length}, d=({d1},{d2}): views do not land at {length} frames")
                checked += 1
    return f"{checked} plans"


CHECKS: Dict[str, Callable[[], str]] = {
    "encoder_shapes": check_encoder_shapes,
    "parameter_formula": check_parameter_formula,
    "infonce_oracle": check_infonce_oracle,
    "infonce_bound": check_infonce_bound,
    "receptive_field": check_receptive_field,
    "lab_round_trip": check_lab_round_trip,
    "view_arithmetic": check_view_arithmetic,
}


def run_selfcheck(names: Optional[Sequence[str]] = None) -> List[CheckResult]:
    """Run the named checks (all by default); a failing check never stops the others"""
    selected = list(CHECKS) if names is None else list(names)
    unknown = [name for name in selected if name not in CHECKS]
    if unknown:
        raise ConfigurationError(f"unknown selfcheck(s) {unknown}; available: {list(CHECKS)}")

    results = []
    for name in selected:
        started = time.perf_counter()
        try:
            detail = CHECKS[name]()
            result = CheckResult(name, True, detail)
        except Exception as e:
            logger.error(f"❌ selfcheck {name} failed: {e}")
            result = CheckResult(name, False, f"{type(e).__name__}: {e}")
        result.seconds = time.perf_counter() - started
        results.append(result)
    passed = sum(r.passed for r in results)
    logger.info(f"Selfcheck: {passed}/{len(results)} checks passed")
    return results
