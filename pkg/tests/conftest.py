import numpy as np
import pytest
import torch

from gazelab.data import SyntheticSceneConfig, generate_synthetic_dataset, split_dataset
from gazelab.models import TrainConfig, build_model, train_model


@pytest.fixture(scope="session")
def tiny_dataset():
    """Small 32x32 synthetic dataset shared by fast tests."""
    config = SyntheticSceneConfig(image_size=32, sample_count=90, noise_level=0.1, seed=42)
    return generate_synthetic_dataset(config)


@pytest.fixture(scope="session")
def tiny_split(tiny_dataset):
    return split_dataset(tiny_dataset, (0.6, 0.2, 0.2), seed=0)


@pytest.fixture(scope="session")
def micro_model(tiny_split):
    """A briefly trained micro model on the tiny dataset."""
    model = build_model(feature_dim=16, output_dim=2, preset="micro-cnn", seed=1, image_size=32)
    train_model(model, tiny_split.train, TrainConfig(epochs=4, batch_size=16, seed=1))
    return model


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
