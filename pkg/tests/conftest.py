import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from densedrop.data import Dataset, synthetic_cifar, write_cifar  # noqa: E402


@pytest.fixture(scope="session")
def synthetic_splits():
    return synthetic_cifar(seed=7)


@pytest.fixture(scope="session")
def cifar_dir(tmp_path_factory, synthetic_splits):
    """A complete CIFAR-10 binary archive set holding synthetic images."""
    train, test = synthetic_splits
    return write_cifar(tmp_path_factory.mktemp("cifar") / "cifar-10-batches-bin", train, test)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_dataset(n=40, classes=10, seed=0, split="train"):
    r = np.random.default_rng(seed)
    images = r.integers(0, 256, size=(n, 3, 32, 32), dtype=np.uint8)
    labels = np.arange(n) % classes
    return Dataset(images, labels.astype(np.int64), split, classes)
