import numpy as np
import pytest

from collapse_lab import _backend


@pytest.fixture(params=_backend.available())
def backend(request, monkeypatch):
    """Run the test once per available kernel implementation."""
    monkeypatch.setattr(_backend, "kernels", _backend.load(request.param))
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def fd_gradient(f, X, h):
    """Central finite-difference gradient of a scalar function of a matrix."""
    G = np.zeros_like(X)
    for idx in np.ndindex(X.shape):
        E = np.zeros_like(X)
        E[idx] = h
        G[idx] = (f(X + E) - f(X - E)) / (2 * h)
    return G
