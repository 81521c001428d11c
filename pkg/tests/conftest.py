import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from kvlab.model import ModelConfig, init_model


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(num_layers=3, num_heads=2, d_model=16, vocab_size=256, seed=42)


@pytest.fixture(scope="session")
def small_model(small_config):
    return init_model(small_config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
