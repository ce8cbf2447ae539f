"""
Encoder blocks, shapes, parameter counts and receptive fields
"""
import pytest
import torch

from app.config import EncoderConfig
from app.exceptions import EncoderShapeError
from app.models import BlockKind, EncoderPreset
from app.services.encoder import (
    BlockSpec,
    EncoderSpec,
    VideoEncoder,
    block_parameter_count,
    build_block,
    build_encoder,
    covers_input,
    describe,
    encode,
    encoder_spec_from_config,
    full_3d_parameter_count,
    full_encoder_spec,
    mid_channels,
    receptive_field,
    tiny_encoder_spec,
)

FULL_SHAPES = [
    (64, 16, 64, 64),
    (64, 14, 62, 62),
    (128, 14, 30, 30),
    (256, 14, 14, 14),
    (512, 7, 7, 7),
    (512, 5, 5, 5),
    (512, 3, 3, 3),
    (512, 1, 1, 1),
]


class TestSpecs:
    def test_full_block_arithmetic(self):
        spec = full_encoder_spec()
        shape = spec.input_shape
        for block, expected in zip(spec.blocks, FULL_SHAPES):
            shape = block.output_shape(shape)
            assert shape == expected

    def test_tiny_block_arithmetic(self):
        spec = tiny_encoder_spec()
        shape = spec.input_shape
        for block, expected in zip(spec.blocks, spec.expected_shapes):
            shape = block.output_shape(shape)
            assert shape == expected

    def test_spec_dict_round_trip(self):
        spec = tiny_encoder_spec(tap_layers=(6, 8))
        assert EncoderSpec.from_dict(spec.to_dict()) == spec

    def test_spec_from_config(self):
        spec = encoder_spec_from_config(EncoderConfig(preset=EncoderPreset.TINY, tap_layers=(5, 8), output_norm=False))
        assert spec.preset == "tiny"
        assert spec.tap_layers == (5, 8)
        assert not spec.output_norm

    def test_conv_block_rejects_trailing_blocks(self):
        with pytest.raises(ValueError):
            BlockSpec(BlockKind.CONV_BLOCK, k=3, kt=3, s=1, st=1, out_channels=8, n=2)

    def test_tap_outside_range(self):
        with pytest.raises(ValueError):
            tiny_encoder_spec(tap_layers=(9,))


class TestParameterCounts:
    def test_mid_channels_formula(self):
        # 3 * 9 * 64 * 64 // (9 * 64 + 3 * 64) = 144
        assert mid_channels(64, 64, 3, 3) == 144

    @pytest.mark.parametrize("preset", [tiny_encoder_spec, full_encoder_spec])
    def test_closed_form_matches_modules(self, preset):
        spec = preset()
        in_channels = spec.input_shape[0]
        for block in spec.blocks:
            module = build_block(block, in_channels, spec.block_norm)
            assert sum(p.numel() for p in module.parameters()) == block_parameter_count(
                block, in_channels, spec.block_norm
            )
            in_channels = block.out_channels

    def test_factorized_weights_match_full_3d(self):
        block = BlockSpec(BlockKind.CONV_BLOCK, k=3, kt=3, s=1, st=1, out_channels=64)
        biases = mid_channels(64, 64, 3, 3) + 64
        assert block_parameter_count(block, 64, norm=False) - biases == full_3d_parameter_count(block, 64)

    def test_describe_lists_every_block(self):
        summary = describe(tiny_encoder_spec())
        assert list(summary) == list(range(1, 9))
        assert summary[3]["kind"] == "res_block"


class TestEncoder:
    def test_full_encoder_realizes_declared_shapes(self):
        encoder = build_encoder(full_encoder_spec(), check_shapes=True)
        with torch.no_grad():
            outputs = encoder.eval().forward_blocks(torch.zeros((1, 3, 32, 128, 128)))
        assert [tuple(o.shape[1:]) for o in outputs] == FULL_SHAPES

    def test_tiny_pyramid_taps(self, generator):
        spec = tiny_encoder_spec()
        encoder = build_encoder(spec)
        view = torch.rand((2, 16, 64, 64, 3), generator=generator)
        pyramid = encode(encoder, view)
        assert pyramid.layers == [5, 6, 8]
        for layer in pyramid.layers:
            assert tuple(pyramid[layer].shape) == (2, *spec.shape_at(layer))
        assert pyramid.num_locations(8) == 1

    def test_single_view_is_batched(self, generator):
        encoder = build_encoder(tiny_encoder_spec()).eval()
        pyramid = encode(encoder, torch.rand((16, 64, 64, 3), generator=generator))
        assert pyramid[8].shape[0] == 1

    def test_wrong_input_shape(self):
        encoder = VideoEncoder(tiny_encoder_spec())
        with pytest.raises(EncoderShapeError, match="expects input"):
            encoder(torch.zeros((1, 3, 8, 64, 64)))

    def test_mismatched_declared_shape_names_block(self):
        spec = tiny_encoder_spec()
        shapes = list(spec.expected_shapes)
        shapes[3] = (32, 6, 7, 7)
        broken = EncoderSpec(spec.blocks, spec.input_shape, tuple(shapes), preset="tiny")
        with pytest.raises(EncoderShapeError) as excinfo:
            build_encoder(broken)
        assert excinfo.value.block_index == 4

    def test_no_norm_variant_has_biases(self):
        encoder = build_encoder(tiny_encoder_spec(block_norm=False, output_norm=False))
        assert not any(isinstance(m, torch.nn.BatchNorm3d) for m in encoder.modules())
        assert any(isinstance(m, torch.nn.Conv3d) and m.bias is not None for m in encoder.modules())

    def test_eval_mode_is_deterministic(self, generator):
        encoder = build_encoder(tiny_encoder_spec()).eval()
        view = torch.rand((1, 16, 64, 64, 3), generator=generator)
        with torch.no_grad():
            torch.testing.assert_close(encode(encoder, view)[5], encode(encoder, view)[5], rtol=0, atol=0)


class TestReceptiveField:
    def test_global_layer_covers_input(self):
        for spec in (full_encoder_spec(), tiny_encoder_spec()):
            assert covers_input(spec, receptive_field(spec, 8, (0, 0, 0)))

    def test_local_layers_are_local(self):
        spec = full_encoder_spec()
        for tap in (5, 6):
            assert not covers_input(spec, receptive_field(spec, tap, (0, 0, 0)))

    def test_neighbouring_locations_shift_by_jump(self):
        spec = tiny_encoder_spec()
        (_, _), (x0, _), _ = receptive_field(spec, 5, (2, 2, 2))
        (_, _), (x1, _), _ = receptive_field(spec, 5, (2, 3, 2))
        assert x1 - x0 == 8

    def test_location_outside_grid(self):
        with pytest.raises(ValueError, match="outside"):
            receptive_field(tiny_encoder_spec(), 5, (5, 0, 0))

    def test_perturbation_outside_field_leaves_feature_unchanged(self):
        spec = tiny_encoder_spec()
        encoder = VideoEncoder(spec).double().eval()
        generator = torch.Generator().manual_seed(21)
        base = torch.rand((1, *spec.input_shape), generator=generator, dtype=torch.float64)
        with torch.no_grad():
            reference = encoder(base)
            for trial in range(20):
                layer = (5, 6)[trial % 2]
                _, t, x, y = spec.shape_at(layer)
                location = tuple(int(torch.randint(0, n, (1,), generator=generator)) for n in (t, x, y))
                (t0, t1), (x0, x1), (y0, y1) = receptive_field(spec, layer, location)
                mask = torch.ones(spec.input_shape[1:], dtype=torch.float64)
                mask[t0:t1, x0:x1, y0:y1] = 0.0
                perturbed = base + mask * torch.randn(base.shape, generator=generator, dtype=torch.float64)
                changed = encoder(perturbed)
                index = (0, slice(None), *location)
                assert torch.equal(reference[layer][index], changed[layer][index])

    def test_perturbation_inside_field_changes_feature(self):
        spec = tiny_encoder_spec()
        encoder = VideoEncoder(spec).double().eval()
        base = torch.rand((1, *spec.input_shape), dtype=torch.float64, generator=torch.Generator().manual_seed(2))
        (t0, _), (x0, _), (y0, _) = receptive_field(spec, 5, (2, 2, 2))
        perturbed = base.clone()
        perturbed[0, :, t0 + 4, x0 + 16, y0 + 16] += 1.0
        with torch.no_grad():
            before, after = encoder(base)[5], encoder(perturbed)[5]
        assert not torch.equal(before[0, :, 2, 2, 2], after[0, :, 2, 2, 2])
