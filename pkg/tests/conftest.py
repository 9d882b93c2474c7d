import numpy as np
import pytest

from utils.config_loader import DEFAULT_COEFFICIENTS
from utils.cost_model import CostCoefficients, load_coefficients
from utils.mp_simulator import ModelConfig, make_layer_weights, make_micro_batches


@pytest.fixture
def small_model():
    return ModelConfig(layers=4, hidden=64, heads=4, seq_len=8, batch=2)


@pytest.fixture
def small_weights(small_model):
    return make_layer_weights(small_model, seed=5)


@pytest.fixture
def small_inputs(small_model):
    return make_micro_batches(small_model, count=2, seed=5)


@pytest.fixture
def fixture_coefficients():
    return load_coefficients(DEFAULT_COEFFICIENTS)


@pytest.fixture
def dyadic_coefficients():
    """Coefficients whose products stay exactly representable in binary."""
    return CostCoefficients(alpha=2.0 ** -20, beta=2.0 ** -10, c=2.0 ** -12, d=1.0,
                            gamma=2.0 ** -12, w=2.0 ** 10, e=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
