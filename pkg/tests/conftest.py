import os
from pathlib import Path

import numpy as np
import pytest

from scratch_tickets.datasets import Dataset, Split, make_toy_dataset
from scratch_tickets.nets import Network, toy_linear, toy_mlp
from scratch_tickets.prng import Prng
from scratch_tickets.tensor import set_default_dtype


@pytest.fixture(autouse=True)
def double_precision():
    set_default_dtype(np.float64)
    yield
    set_default_dtype(np.float64)


@pytest.fixture
def toy_dataset() -> Dataset:
    return make_toy_dataset(Prng(0).split("toy"), train_size=64, test_size=64)


@pytest.fixture
def image_split() -> Split:
    prng = Prng(7)
    x = prng.uniform(0.0, 1.0, (6, 1, 8, 8))
    y = np.array([0, 1, 2, 0, 1, 2])
    return Split(x, y)


def fixed_network(weights: np.ndarray) -> Network:
    """A dense toy_linear network over explicit out x in weights."""
    spec = toy_linear((weights.shape[1],), weights.shape[0])
    masks = {"fc": np.ones(weights.shape, dtype=bool)}
    return Network(spec, {"fc": np.asarray(weights, dtype=np.float64)}, {"fc": np.zeros(weights.shape)}, masks=masks)


@pytest.fixture
def diagonal_network() -> Network:
    return fixed_network(np.array([[1.0, -1.0], [-1.0, 1.0]]))


@pytest.fixture
def mlp_spec():
    return toy_mlp((2,), 2)


def slow_enabled() -> bool:
    return os.environ.get("RST_RUN_SLOW") == "1"


def mnist_root() -> Path:
    return Path(os.environ.get("RST_DATA_DIR", "data"))
