import logging

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _quiet_design_warnings():
    logging.getLogger("adaptivity").setLevel(logging.ERROR)
    yield


def random_psd(rng, d, ridge=0.0):
    B = rng.standard_normal((d + 2, d))
    return B.T @ B + ridge * np.eye(d)


def random_context_set(rng, K, d):
    X = rng.standard_normal((K, d))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    return X * rng.uniform(0.2, 1.0, size=(K, 1))
