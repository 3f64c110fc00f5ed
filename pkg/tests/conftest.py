import numpy as np
import pytest

from modalanchor.checks import TINY
from modalanchor.encoder import DualEncoder


@pytest.fixture
def tiny_model():
    return DualEncoder(TINY)


@pytest.fixture
def tiny_batch():
    rng = np.random.default_rng(5)
    return rng.normal(size=(5, TINY.d_v)), rng.integers(0, TINY.vocab, size=(5, TINY.max_len))
