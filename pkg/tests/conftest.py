import numpy as np
import pytest

from volex import MarketParams, TimeGrid


@pytest.fixture
def params():
    """The benchmark market: kappa=1e-4, kappa~=0.01, T=1, X0=10."""
    return MarketParams(kappa=1e-4, kappa_tilde=0.01, horizon=1.0, x0=10.0)


@pytest.fixture
def grid():
    return TimeGrid(horizon=1.0, n_steps=100)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
