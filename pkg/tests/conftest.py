import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from spikecal import nn, store, train  # noqa: E402


@pytest.fixture(scope="session")
def blob_dataset():
    return store.make_synthetic("blobs", 400, seed=11, classes=4, dim=32)


@pytest.fixture(scope="session")
def trained_mlp(blob_dataset):
    """A small net trained to saturation on well-separated blobs."""
    model = nn.build_mlp(32, [32, 16], 4, seed=11)
    trained = train.train_reference(model, blob_dataset, epochs=15, lr=0.05, seed=11)
    acc = train.accuracy(trained, blob_dataset.images, blob_dataset.labels)
    assert acc >= 0.99, f"fixture net failed to train (accuracy {acc})"
    return trained


@pytest.fixture(scope="session")
def calibration(trained_mlp, blob_dataset):
    return store.build_calibration_cache(trained_mlp, blob_dataset, 96, seed=5)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
