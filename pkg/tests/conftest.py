import numpy as np
import pytest
from cmscan.numerics.rng import Rng
from cmscan.numerics.tensor import Variable

@pytest.fixture
def rng():
    return Rng(7)

@pytest.fixture
def draw():
    """Factory of f64 Variables with standard normal values"""
    generator = np.random.default_rng(42)
    def factory(*shape, name=None, scale=1.0):
        return Variable(scale * generator.standard_normal(shape), name=name, requires_grad=True)
    return factory
