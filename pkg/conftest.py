"""
Shared fixtures: seeded generators, random positive definite matrices and a
small toy model with sequence data
"""
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from kronround.model import make_dataset, make_toy_model
from kronround.sketch import KronSketch


def make_pd(n: int, seed: int = 0, ridge: float = 0.1) -> np.ndarray:
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    return A @ A.T / n + ridge * np.eye(n)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def random_pd():
    return make_pd


@pytest.fixture
def random_sketch():
    def build(m: int, n: int, seed: int = 0) -> KronSketch:
        return KronSketch(make_pd(m, seed), make_pd(n, seed + 1))
    return build


@pytest.fixture
def toy_model():
    return make_toy_model([6, 4, 3], seed=0, weight_scale=1.5, mix=0.5)


@pytest.fixture
def toy_data():
    return make_dataset(6, 12, 3, correlation=0.5, seed=1)
