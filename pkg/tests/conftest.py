import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_instance(rng, n=None, m=None, uniform=False, min_gap=0.0):
    """One weighted-values / anchor-grid problem with distinct values."""
    n = int(rng.integers(3, 9)) if n is None else n
    m = int(rng.integers(2, 7)) if m is None else m
    if uniform:
        a = np.full(n, 1.0 / n)
        b = np.full(m, 1.0 / m)
    else:
        a = rng.dirichlet(np.full(n, 5.0))
        b = rng.dirichlet(np.full(m, 5.0))
    while True:
        x = rng.random(n)
        span = x.max() - x.min()
        scaled = np.sort((x - x.min()) / span)
        if np.diff(scaled).min() > min_gap:
            break
    y = np.linspace(0.0, 1.0, m)
    return a, x, b, y
