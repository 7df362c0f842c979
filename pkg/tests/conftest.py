import numpy as np
import pytest
import torch

from hsrgan.generator import SynthesisConfig
from hsrgan.hsr import HSRConfig, build_extractor
from hsrgan.metrics import train_attribute_scorers
from hsrgan.synthdata import DatasetSpec, generate_dataset, load_dataset
from hsrgan.trainloop import TrainConfig, TrainState, train_step

torch.set_num_threads(2)

# small synthesis config shared by fast tests
TINY = SynthesisConfig(resolution=16, z_dim=12, w_dim=12, mapping_depth=2,
                       base_channels=8, channel_max=16, tap_resolutions=(8,))


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "archive"
    generate_dataset(DatasetSpec(resolution=32, sample_count=6000, seed=11), out)
    return out


@pytest.fixture(scope="session")
def archive(dataset_dir):
    return load_dataset(dataset_dir)


@pytest.fixture(scope="session")
def scorers(archive):
    return train_attribute_scorers(archive, seed=0)


@pytest.fixture(scope="session")
def trained_extractor(archive):
    return build_extractor("trained", archive=archive, input_resolution=32, seed=0)


@pytest.fixture(scope="session")
def random_extractor():
    return build_extractor("random-init", input_resolution=32, seed=5)


@pytest.fixture(scope="session")
def small_gan(archive, random_extractor):
    """A briefly trained default-architecture GAN for metric/edit tests."""
    cfg = TrainConfig(total_kimg=1.0, batch_size=16, seed=0, enable_plr=True,
                      enable_hsr=True, hsr=HSRConfig(warmup_kimg=0.0))
    state = TrainState(cfg, SynthesisConfig(resolution=32),
                       torch.from_numpy(archive.images), extractor=random_extractor)
    steps = int(cfg.total_kimg * 1000 / cfg.batch_size)
    for _ in range(steps):
        train_step(state)
    state.G_ema.requires_grad_(False).eval()
    return state
