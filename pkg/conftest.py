import numpy as np
import pytest

from dataset import Dataset, make_synthetic
from models import TreeParams


def exact_params(p: int, d_max: int = 3, criterion: str = "gini") -> TreeParams:
    """No randomness left: every attribute and every valid threshold is kept."""
    return TreeParams(d_max=d_max, d_rmax=0, k=10_000, p_tilde=p, criterion=criterion)


def random_tiny_dataset(rng: np.random.Generator, n: int, p: int) -> Dataset:
    # Small integer grid so duplicate values and score ties are common.
    features = rng.integers(0, 6, size=(n, p)).astype(np.float64)
    labels = rng.integers(0, 2, size=n)
    return Dataset(features, labels)


@pytest.fixture
def tiny_dataset() -> Dataset:
    features = np.array(
        [
            [1.0, 5.0],
            [2.0, 3.0],
            [3.0, 8.0],
            [4.0, 1.0],
            [5.0, 7.0],
            [6.0, 2.0],
            [7.0, 6.0],
            [8.0, 4.0],
        ]
    )
    labels = np.array([1, 0, 1, 1, 0, 0, 1, 0])
    return Dataset(features, labels)


@pytest.fixture
def synthetic_small() -> Dataset:
    return make_synthetic(600, seed=3)
