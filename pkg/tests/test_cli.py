"""
Command line: exit codes, overrides and the synthesize / finetune / evaluate chain
"""
import pytest

from app.config import dump_run_config
from app.main import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, UsageError, main, split_overrides


@pytest.fixture
def config_file(tiny_config, tmp_path):
    return dump_run_config(tiny_config, tmp_path / "tiny.yaml")


class TestArguments:
    def test_overrides_are_kept(self):
        assert split_overrides(["--pretrain.steps=2", "--view.crop_size=64"]) == [
            "--pretrain.steps=2", "--view.crop_size=64",
        ]

    @pytest.mark.parametrize("token", ["--verbose", "pretrain.steps=2", "--steps=2"])
    def test_stray_arguments_are_usage_errors(self, token):
        with pytest.raises(UsageError):
            split_overrides([token])

    def test_unknown_command(self):
        assert main(["train"]) == EXIT_USAGE

    def test_unknown_flag(self, config_file):
        assert main(["pretrain", "--config", str(config_file), "--fast"]) == EXIT_USAGE

    def test_invalid_config_value(self, config_file):
        assert main(["pretrain", "--config", str(config_file), "--pretrain.batch_size=1"]) == EXIT_USAGE

    def test_evaluate_needs_checkpoint(self):
        assert main(["evaluate"]) == EXIT_USAGE

    def test_unknown_selfcheck(self):
        assert main(["selfcheck", "--check", "no_such_check"]) == EXIT_USAGE

    @pytest.mark.parametrize("axes", ["pretrain.layer_pairs.antecedent=[5,6", "lr"])
    def test_malformed_ablation_axes(self, config_file, axes):
        assert main(["ablate", "--config", str(config_file), "--axes", axes]) == EXIT_USAGE


class TestCommands:
    def test_selfcheck_subset(self, capsys):
        assert main(["selfcheck", "--check", "view_arithmetic", "--check", "lab_round_trip"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "[PASS] view_arithmetic" in out
        assert "[PASS] lab_round_trip" in out

    def test_corrupted_checkpoint_is_a_failure(self, tmp_path):
        broken = tmp_path / "ckpt_9.pt"
        broken.write_bytes(b"\x00" * 32)
        assert main(["evaluate", "--checkpoint", str(broken)]) == EXIT_FAILURE

    def test_pretrain_writes_checkpoint(self, config_file, tiny_config):
        assert main(["pretrain", "--config", str(config_file), "--pretrain.steps=1"]) == EXIT_OK
        assert (tiny_config.output_dir / "pretrain" / "checkpoints" / "ckpt_1.pt").is_file()

    def test_synthesize_finetune_evaluate(self, config_file, tiny_config, capsys):
        run_dir = tiny_config.output_dir
        assert main(["synthesize", "--config", str(config_file)]) == EXIT_OK
        manifest = run_dir / "dataset" / "manifest.tsv"
        assert len(manifest.read_text().splitlines()) == 8

        frame_dir = ["--dataset.source=frame_dir", f"--dataset.root={run_dir / 'dataset'}"]
        assert main(["finetune", "--config", str(config_file), *frame_dir]) == EXIT_OK
        assert "test video accuracy" in capsys.readouterr().out
        checkpoint = run_dir / "finetune" / "checkpoints" / "ckpt_3.pt"
        assert checkpoint.is_file()
        assert (run_dir / "finetune" / "eval_report.json").is_file()

        assert main(["evaluate", "--checkpoint", str(checkpoint), "--split", "train"]) == EXIT_OK
        assert "train video accuracy" in capsys.readouterr().out
