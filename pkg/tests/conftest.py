import numpy as np
import pytest
import torch

from artifactdet.backbone import make_toy_backbone
from artifactdet.model import ArtifactDetector, build_backbone
from artifactdet.toydata import make_toy_dataset, toy_config
from artifactdet.training import SampleDataset, train_full

torch.set_num_threads(1)

TOY_TEMPERATURE = 0.07
TOY_EPOCHS = 100


@pytest.fixture
def backbone():
    return make_toy_backbone(layers=4, d=16, embed=8, seed=0)


@pytest.fixture
def cfg():
    return toy_config(temperature=TOY_TEMPERATURE, epochs=2)


@pytest.fixture
def model(cfg):
    return ArtifactDetector(build_backbone(cfg), cfg)


@pytest.fixture(scope="session")
def toy_samples():
    return make_toy_dataset(per_class=3, size=32, seed=0)


@pytest.fixture
def toy_ds(toy_samples):
    return SampleDataset(toy_samples, 32)


def full_toy_run(out_dir, **overrides):
    cfg = toy_config(temperature=TOY_TEMPERATURE, epochs=TOY_EPOCHS, **overrides)
    ds = SampleDataset(make_toy_dataset(per_class=3, size=32, seed=0), cfg.input_size)
    return cfg, ds, train_full(cfg, (ds, SampleDataset([], cfg.input_size)), out_dir)


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """One full three-stage toy run shared across tests."""
    return full_toy_run(tmp_path_factory.mktemp("toy_run"))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
