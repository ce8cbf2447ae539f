"""
Shared fixtures: a desk-sized run configuration and its synthetic splits
"""
import logging

import pytest
import torch

from app.config import build_run_config, get_settings
from app.services.video_io import generate_synthetic_dataset
from app.utils.color import reset_range_warning


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow learning experiments")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running learning experiments (enable with --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


TINY_RUN = {
    "seed": 0,
    "dataset": {
        "source": "synthetic",
        "frame_size": [64, 64],
        "synthetic": {
            "class_count": 2,
            "clip_length": 40,
            "resolution": [32, 32],
            "clips_per_class": 4,
            "train_fraction": 0.5,
            "size_range": [6, 12],
        },
    },
    "view": {
        "final_length": 16,
        "crop_size": 64,
        "downsample_factors": [1, 2],
        "crop_scale": [0.5, 1.0],
    },
    "encoder": {"preset": "tiny", "head_dim": 16, "head_hidden": 16},
    "pretrain": {
        "steps": 3,
        "batch_size": 2,
        "checkpoint_interval": 2,
        "log_interval": 1,
    },
    "finetune": {
        "views": 2,
        "hidden": 16,
        "steps": 3,
        "batch_size": 2,
        "decay_every": 2,
        "samples_per_video": 2,
        "log_interval": 1,
    },
}


@pytest.fixture(autouse=True)
def _isolated_settings(monkeypatch, tmp_path):
    monkeypatch.setenv("VDIM_OUTPUT_DIR", str(tmp_path / "runs"))
    monkeypatch.setenv("VDIM_DEVICE", "cpu")
    monkeypatch.setenv("VDIM_NUM_WORKERS", "0")
    get_settings.cache_clear()
    reset_range_warning()
    yield
    get_settings.cache_clear()


@pytest.fixture
def tiny_config(tmp_path):
    return build_run_config({**TINY_RUN, "output_dir": str(tmp_path / "run")})


@pytest.fixture
def tiny_splits(tiny_config):
    return generate_synthetic_dataset(tiny_config.dataset.synthetic, tiny_config.dataset.frame_size)


@pytest.fixture
def generator():
    return torch.Generator().manual_seed(1234)


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.INFO)
