import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from distillock.model import ModelConfig, init_model

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_config():
    return ModelConfig(vocab_size=16, model_dim=6, ffn_dim=5, num_layers=2, max_seq_len=5, seed=3)


@pytest.fixture
def small_model(small_config):
    return init_model(small_config)
