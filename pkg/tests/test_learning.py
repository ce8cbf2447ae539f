"""
Desk-scale learning experiments on the synthetic motion classes.
Slow: run with `pytest --runslow`.
"""
from pathlib import Path
from typing import Sequence

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from scipy import stats

from app.config import RunConfig, load_run_config
from app.services.downstream import evaluate, finetune, load_pretrained
from app.services.pretrain import latest_checkpoint, pretrain
from app.services.video_io import generate_synthetic_dataset

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"
SEEDS = (0, 1, 2)

pytestmark = pytest.mark.slow


def _config(tmp_path: Path, overrides: Sequence[str] = ()) -> RunConfig:
    return load_run_config(CONFIG_DIR / "synthetic_tiny.yaml", [f"--output_dir={tmp_path}", *overrides])


def _splits(config: RunConfig):
    return generate_synthetic_dataset(config.dataset.synthetic, config.dataset.frame_size)


def _test_accuracy(config: RunConfig, run_dir: Path, pretrained=None) -> float:
    train, test = _splits(config)
    result = finetune(train, config, pretrained, run_dir)
    return evaluate(result.model, test, config).video_accuracy


class TestSyntheticDataset:
    def test_single_frames_do_not_reveal_the_class(self):
        """A per-frame linear classifier stays within 15 points of chance"""
        config = load_run_config(CONFIG_DIR / "synthetic_tiny.yaml")
        train, test = _splits(config)
        generator = torch.Generator().manual_seed(0)

        def frames(split):
            xs, ys = [], []
            for index, item in enumerate(split.items):
                clip = split.decode(index)
                t = int(torch.randint(0, clip.num_frames, (1,), generator=generator))
                gray = clip.frames[t].mean(dim=-1)[None, None]
                xs.append(F.adaptive_avg_pool2d(gray, 16).flatten())
                ys.append(item.label)
            return torch.stack(xs), torch.tensor(ys)

        x_train, y_train = frames(train)
        x_test, y_test = frames(test)
        classifier = torch.nn.Linear(x_train.shape[1], train.class_count)
        optimizer = torch.optim.Adam(classifier.parameters(), lr=1e-2)
        for _ in range(500):
            optimizer.zero_grad()
            F.cross_entropy(classifier(x_train), y_train).backward()
            optimizer.step()
        accuracy = float((classifier(x_test).argmax(dim=1) == y_test).float().mean())
        assert accuracy <= 1.0 / train.class_count + 0.15


class TestPretraining:
    def test_mi_estimate_rises(self, tmp_path):
        config = _config(tmp_path, ["--pretrain.steps=200", "--pretrain.log_interval=1"])
        train, _ = _splits(config)
        state = pretrain(train, config, tmp_path / "pretrain")

        def mi(record):
            return np.mean([value for key, value in record.items() if key.startswith("mi/")])

        first = np.mean([mi(r) for r in state.history[:20]])
        last = np.mean([mi(r) for r in state.history[-20:]])
        assert last > first


class TestDownstream:
    def test_pretraining_beats_chance_and_random_init(self, tmp_path):
        pretrained_acc, random_acc = [], []
        for seed in SEEDS:
            config = _config(tmp_path / f"seed{seed}", [f"--seed={seed}"])
            train, _ = _splits(config)
            state = pretrain(train, config, tmp_path / f"seed{seed}" / "pretrain")
            pretrained_acc.append(_test_accuracy(config, tmp_path / f"seed{seed}" / "pretrained", state))
            random_acc.append(_test_accuracy(config, tmp_path / f"seed{seed}" / "random"))

        chance = 1.0 / config.dataset.synthetic.class_count
        assert np.mean(pretrained_acc) >= chance + 0.30
        assert np.mean(pretrained_acc) >= np.mean(random_acc) + 0.10

    def test_less_downsampling_is_no_worse(self, tmp_path):
        by_factor = {1: [], 3: []}
        for seed in SEEDS:
            base = _config(tmp_path / f"seed{seed}", [f"--seed={seed}"])
            pretrain(_splits(base)[0], base, tmp_path / f"seed{seed}" / "pretrain")
            checkpoint = latest_checkpoint(tmp_path / f"seed{seed}" / "pretrain" / "checkpoints")
            for factor in by_factor:
                config = _config(tmp_path / f"seed{seed}", [f"--seed={seed}", f"--finetune.downsample={factor}"])
                by_factor[factor].append(
                    _test_accuracy(config, tmp_path / f"seed{seed}" / f"d{factor}", load_pretrained(checkpoint, config))
                )
        assert np.mean(by_factor[1]) >= np.mean(by_factor[3])

    def test_frozen_encoder_beats_chance(self, tmp_path):
        config = _config(tmp_path, ["--finetune.freeze_encoder=true", "--finetune.steps=500"])
        train, test = _splits(config)
        state = pretrain(train, config, tmp_path / "pretrain")
        result = finetune(train, config, state, tmp_path / "frozen")
        report = evaluate(result.model, test, config)
        hits = sum(p.predicted == p.label for p in report.predictions)
        chance = 1.0 / test.class_count
        assert stats.binomtest(hits, len(report.predictions), chance, alternative="greater").pvalue < 0.05
