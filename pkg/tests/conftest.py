import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from assure.model import Dataset

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_data(n=200, seed=0, p=0, hetero=True, cost=0.0, mu=None):
    """Gaussian dataset with known means; returns (data, mu)."""
    rng = np.random.default_rng(seed)
    if mu is None:
        mu = rng.normal(0.3, 1.0, n)
    sigma = np.exp(rng.normal(0.0, 0.4, n)) if hetero else np.ones(n)
    y = mu + sigma * rng.standard_normal(n)
    X = (mu[:, None] + rng.standard_normal((n, p))) if p else None
    return Dataset(y, sigma, np.full(n, float(cost)), X), mu


@pytest.fixture
def data():
    return make_data()[0]


@pytest.fixture
def three_row_csv(tmp_path):
    path = tmp_path / "three.csv"
    path.write_text("y,sigma,k\n1.5,1.0,0.0\n-0.4,0.5,0.0\n2.25,2.0,0.0\n")
    return path
