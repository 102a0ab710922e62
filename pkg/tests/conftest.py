import numpy as np
import pytest

from kvcarry.kernels import Precision
from kvcarry.model import ModelConfig, random_weights


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(
        n_layers=2,
        n_heads=4,
        n_kv_heads=2,
        d_model=32,
        d_head=8,
        d_ff=64,
        vocab_size=64,
        max_position=65536,
    )


@pytest.fixture(scope="session")
def tiny_weights(tiny_config):
    return random_weights(tiny_config, seed=0, precision=Precision.F64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
