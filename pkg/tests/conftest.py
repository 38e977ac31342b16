import logging

import pytest
import torch

from config import settings
from dataset import load_mpos
from models import PhantomConfig, ScheduleConfig, TrainConfig, Variant
from phantom import generate_phantom_dataset

TINY_IMAGE_SIZE = 32


@pytest.fixture(autouse=True)
def quiet_progress(monkeypatch):
    monkeypatch.setattr(settings, "progress_bars", False)
    monkeypatch.setattr(settings, "device", "cpu")
    logging.getLogger().setLevel(logging.INFO)


@pytest.fixture(scope="session")
def phantom_root(tmp_path_factory):
    """20 pairs (4 per category) at 32 px."""
    root = tmp_path_factory.mktemp("phantom")
    generate_phantom_dataset(20, seed=3, config=PhantomConfig(image_size=TINY_IMAGE_SIZE), out_dir=root)
    return root


@pytest.fixture
def phantom_manifest(phantom_root):
    return load_mpos(phantom_root)


@pytest.fixture
def tiny_config():
    def build(variant: Variant = Variant.FULL, **overrides) -> TrainConfig:
        values = dict(
            variant=variant,
            epochs=1,
            batch_size=2,
            image_size=TINY_IMAGE_SIZE,
            n_residual_blocks=1,
            schedule=ScheduleConfig(num_steps=50),
            t_init=10,
            seed=1,
            sample_grid_size=2,
        )
        values.update(overrides)
        return TrainConfig(**values)

    return build


@pytest.fixture
def cpu():
    return torch.device("cpu")
