import numpy as np
import pytest

from edgepatch.config import (
    ExtractorTrainConfig,
    GeneratorTrainConfig,
    VictimTrainConfig,
)
from edgepatch.data import generate_toy_dataset, holdout_split


@pytest.fixture(scope="session")
def toy_dataset():
    """Small 4-identity dataset shared by fast module tests."""
    return generate_toy_dataset(4, 3, (64, 32), seed=5)


@pytest.fixture(scope="session")
def toy_split(toy_dataset):
    return holdout_split(toy_dataset, 1)


@pytest.fixture(scope="session")
def tiny_extractor(toy_split):
    from edgepatch.extractor import train_extractor

    train, _ = toy_split
    cfg = ExtractorTrainConfig(epochs=3, batch_identities=4, seed=11)
    return train_extractor(train, cfg)


@pytest.fixture(scope="session")
def tiny_generator(toy_split, tiny_extractor):
    from edgepatch.generator import train_generator

    train, _ = toy_split
    cfg = GeneratorTrainConfig(epochs=2, batch_identities=4, depth=2, seed=13)
    return train_generator(train, tiny_extractor, cfg)


@pytest.fixture(scope="session")
def tiny_victim(toy_split):
    from edgepatch.victim import train_toy_victim

    train, _ = toy_split
    cfg = VictimTrainConfig(epochs=6, batch_identities=4, seed=17)
    return train_toy_victim(train, cfg)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
