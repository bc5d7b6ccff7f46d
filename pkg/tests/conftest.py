import numpy as np
import pytest

from pcrp.frpointhop import HopConfig, extract_features, fit_model
from pcrp.synthetic import shape_suite


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_suite():
    return shape_suite(8, n=512, seed=11)


@pytest.fixture(scope="session")
def small_model(small_suite):
    return fit_model([c for _, c in small_suite], HopConfig(), rng_seed=0)


@pytest.fixture(scope="session")
def small_features(small_model, small_suite):
    return [extract_features(small_model, c) for _, c in small_suite]
