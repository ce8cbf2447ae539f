"""
Pretraining loop: deterministic batches, checkpoints, resume and failure handling
"""
import math

import pytest
import torch

from app.config import build_run_config, config_hash, run_config_to_dict
from app.exceptions import CheckpointError, NonFiniteLossError
from app.services.encoder import encode, full_encoder_spec
from app.services.pretrain import (
    PretrainBatches,
    checkpoint_path,
    derive_seed,
    get_pretrain_service,
    latest_checkpoint,
    load_checkpoint,
    pretrain,
)
from app.utils.metrics import read_metrics


def _with(config, **sections):
    data = run_config_to_dict(config)
    for section, values in sections.items():
        if isinstance(values, dict):
            data[section] = {**data[section], **values}
        else:
            data[section] = values
    return build_run_config(data)


class TestSeeds:
    def test_derive_seed_is_stable(self):
        assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
        assert derive_seed(1, 2, 3) != derive_seed(1, 2, 4)
        assert 0 <= derive_seed(0) < 2 ** 63


class TestPretrainBatches:
    def test_batch_shapes(self, tiny_config, tiny_splits):
        batches = PretrainBatches(tiny_splits[0], tiny_config, steps=3)
        first, second = batches[0]
        assert tuple(first.shape) == (2, 16, 64, 64, 3)
        assert tuple(second.shape) == (2, 16, 64, 64, 3)

    def test_batches_are_a_function_of_step(self, tiny_config, tiny_splits):
        a = PretrainBatches(tiny_splits[0], tiny_config, steps=3)
        b = PretrainBatches(tiny_splits[0], tiny_config, steps=3)
        torch.testing.assert_close(a[1][0], b[1][0])
        assert not torch.equal(a[0][0], a[1][0])

    def test_epoch_visits_every_video(self, tiny_config, tiny_splits):
        batches = PretrainBatches(tiny_splits[0], tiny_config, steps=4)
        visited = {batches.sample_index(step, slot) for step in range(2) for slot in range(2)}
        assert visited == set(range(len(tiny_splits[0])))

    def test_temporal_difference_doubles_consequent(self, tiny_config, tiny_splits):
        config = _with(tiny_config, pretrain={"temporal_difference": True})
        first, second = PretrainBatches(tiny_splits[0], config, steps=1)[0]
        assert first.shape[1] == 16
        assert second.shape[1] == 32


class TestPretrainRun:
    def test_run_writes_outputs(self, tiny_config, tiny_splits, tmp_path):
        run_dir = tmp_path / "pretrain"
        state = pretrain(tiny_splits[0], tiny_config, run_dir)
        assert state.step == 3
        records = read_metrics(run_dir / "metrics.jsonl")
        assert [r["step"] for r in records] == [1, 2, 3]
        assert all(r["config_hash"] == config_hash(tiny_config) for r in records)
        assert any(key.startswith("mi/j5_jp8") for key in records[0])
        assert (run_dir / "checkpoints" / "ckpt_2.pt").is_file()
        assert (run_dir / "checkpoints" / "ckpt_3.pt").is_file()
        assert (run_dir / "resolved_config.yaml").is_file()
        assert (run_dir / "loss_curve.png").is_file()
        assert latest_checkpoint(run_dir / "checkpoints").name == "ckpt_3.pt"

    def test_identical_runs_are_identical(self, tiny_config, tiny_splits, tmp_path):
        config = _with(tiny_config, pretrain={"precision": "float64"})
        a = pretrain(tiny_splits[0], config, tmp_path / "a")
        b = pretrain(tiny_splits[0], config, tmp_path / "b")
        for x, y in zip(a.history, b.history):
            assert abs(x["loss"] - y["loss"]) <= 1e-10

    def test_resume_continues_the_same_trace(self, tiny_config, tiny_splits, tmp_path):
        config = _with(tiny_config, pretrain={"precision": "float64", "steps": 5})
        straight = pretrain(tiny_splits[0], config, tmp_path / "straight")

        short = _with(config, pretrain={"steps": 2})
        pretrain(tiny_splits[0], short, tmp_path / "resumed")
        resumed = pretrain(tiny_splits[0], config, tmp_path / "resumed",
                           resume_from=checkpoint_path(tmp_path / "resumed" / "checkpoints", 2))
        assert resumed.step == 5
        assert len(resumed.history) == len(straight.history) == 5
        for step, (a, b) in enumerate(zip(resumed.history, straight.history), start=1):
            assert abs(a["loss"] - b["loss"]) <= 1e-10, f"step {step}"
        expected = straight.parameters()
        for name, value in resumed.parameters().items():
            torch.testing.assert_close(value, expected[name], rtol=0, atol=1e-10, msg=name)
        steps = [r["step"] for r in read_metrics(tmp_path / "resumed" / "metrics.jsonl")]
        assert steps == [1, 2, 3, 4, 5]

    def test_initial_loss_is_finite_and_non_negative(self, tiny_config, tiny_splits):
        service = get_pretrain_service(tiny_config)
        state = service.build_state()
        batches = PretrainBatches(tiny_splits[0], tiny_config, steps=3)
        for step in range(3):
            first, second = batches[step]
            with torch.no_grad():
                pyramid = encode(state.encoder, torch.cat([first, second]))
                result = state.objective(*service.split_pyramids(pyramid, first.shape[0], state.objective))
            assert torch.isfinite(result.loss)
            assert float(result.loss) >= 0.0

    def test_zero_learning_rate_leaves_parameters_unchanged(self, tiny_config, tiny_splits):
        config = _with(tiny_config, pretrain={"learning_rate": 0.0})
        service = get_pretrain_service(config)
        state = service.build_state()
        modules = [state.encoder, state.objective]
        before = {f"{i}.{name}": p.detach().clone()
                  for i, module in enumerate(modules) for name, p in module.named_parameters()}
        batches = PretrainBatches(tiny_splits[0], config, steps=4)
        for step in range(4):
            service.train_step(state, *batches[step])
        assert state.step == 4
        for i, module in enumerate(modules):
            for name, parameter in module.named_parameters():
                assert torch.equal(parameter.detach(), before[f"{i}.{name}"]), name

    def test_duplicated_batch_scores_log_batch_size(self, tiny_config, tiny_splits):
        config = _with(tiny_config, pretrain={"precision": "float64", "batch_size": 4,
                                              "negative_mode": "fixed_pair", "loss_reduction": "mean"})
        service = get_pretrain_service(config)
        state = service.build_state()
        state.encoder.eval()
        state.objective.eval()
        first, second = PretrainBatches(tiny_splits[0], config, steps=1)[0]
        # one sample and its view pair repeated across the batch
        first, second = first[:1].repeat(4, 1, 1, 1, 1), second[:1].repeat(4, 1, 1, 1, 1)
        with torch.no_grad():
            pyramid = encode(state.encoder, torch.cat([first, second]))
            result = state.objective(*service.split_pyramids(pyramid, 4, state.objective))
        log_m = math.log(4)
        for pair, estimate in result.estimates.items():
            assert result.denominator_terms[pair] == 4
            torch.testing.assert_close(estimate, torch.full_like(estimate, -log_m), rtol=0, atol=1e-6)
        assert abs(float(result.loss) - len(state.objective.pairs) * log_m) <= 1e-6

    def test_non_finite_loss_writes_diagnostics(self, tiny_config, tiny_splits, tmp_path):
        service = get_pretrain_service(tiny_config, tmp_path / "broken")
        state = service.build_state()
        with torch.no_grad():
            next(state.encoder.parameters()).fill_(float("nan"))
        first, second = PretrainBatches(tiny_splits[0], tiny_config, steps=1)[0]
        with pytest.raises(NonFiniteLossError) as excinfo:
            service.train_step(state, first, second)
        assert excinfo.value.step == 1
        assert list((tmp_path / "broken").glob("diagnostics_step1.json"))
        assert excinfo.value.diagnostics["pairs"]

    def test_temporal_difference_step(self, tiny_config, tiny_splits, tmp_path):
        config = _with(tiny_config, pretrain={"temporal_difference": True})
        service = get_pretrain_service(config, tmp_path / "diff")
        state = service.build_state()
        record = service.train_step(state, *PretrainBatches(tiny_splits[0], config, steps=1)[0])
        assert torch.isfinite(torch.tensor(record["loss"]))


class TestCheckpoints:
    @pytest.fixture
    def saved(self, tiny_config, tiny_splits, tmp_path):
        config = _with(tiny_config, pretrain={"steps": 2})
        pretrain(tiny_splits[0], config, tmp_path / "ckpt")
        return tmp_path / "ckpt" / "checkpoints" / "ckpt_2.pt"

    def test_round_trip(self, tiny_config, tiny_splits, tmp_path):
        config = _with(tiny_config, pretrain={"steps": 2})
        trained = pretrain(tiny_splits[0], config, tmp_path / "ckpt")
        saved = tmp_path / "ckpt" / "checkpoints" / "ckpt_2.pt"
        state = get_pretrain_service(config).restore_state(saved)
        assert state.step == 2
        assert state.history == trained.history

        expected = trained.parameters()
        restored = state.parameters()
        assert restored.keys() == expected.keys()
        for name, value in restored.items():
            assert torch.equal(value, expected[name]), name

        saved_optimizer = trained.optimizer.state_dict()
        restored_optimizer = state.optimizer.state_dict()
        assert restored_optimizer["param_groups"] == saved_optimizer["param_groups"]
        assert restored_optimizer["state"].keys() == saved_optimizer["state"].keys()
        for index, slots in restored_optimizer["state"].items():
            for slot, value in slots.items():
                assert torch.equal(torch.as_tensor(value), torch.as_tensor(saved_optimizer["state"][index][slot])), (
                    f"optimizer state {index}.{slot}"
                )

    def test_corrupted_file_names_path(self, tmp_path):
        broken = tmp_path / "ckpt_1.pt"
        broken.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError, match="ckpt_1.pt"):
            load_checkpoint(broken)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(tmp_path / "absent.pt")

    def test_spec_mismatch(self, saved):
        with pytest.raises(CheckpointError, match="spec mismatch"):
            load_checkpoint(saved, expected_spec=full_encoder_spec())

    def test_missing_fields(self, tmp_path):
        path = tmp_path / "partial.pt"
        torch.save({"format_version": 1, "kind": "pretrain"}, path)
        with pytest.raises(CheckpointError, match="missing fields"):
            load_checkpoint(path)
