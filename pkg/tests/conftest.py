import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from neuroselect.engine import Conv2d, Dense, Flatten, MaxPool2d, ReLU, Sequential  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cnn():
    """conv(1->4, 3x3, pad 1) relu pool -> dense(64->6) relu -> dense(6->3)."""
    rng = np.random.default_rng(7)
    layers = [Conv2d(1, 4, 3, padding=1, rng=rng), ReLU(), MaxPool2d(2), Flatten(),
              Dense(64, 6, rng=rng), ReLU(), Dense(6, 3, rng=rng)]
    return Sequential(layers, (1, 8, 8), precision="f64")


@pytest.fixture
def mlp():
    rng = np.random.default_rng(3)
    return Sequential([Dense(5, 7, rng=rng), ReLU(), Dense(7, 4, rng=rng), ReLU(), Dense(4, 3, rng=rng)],
                      (5,), precision="f64")
