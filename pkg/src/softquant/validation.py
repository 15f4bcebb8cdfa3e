"""Input validation helpers.

All public entry points funnel their array arguments through these checks so
that shape or domain mistakes raise :class:`~softquant.exceptions.InvalidInput`
early, with the offending argument named.
"""

import numpy as np

from .exceptions import InvalidInput

WEIGHT_SUM_TOL = 1e-12


def as_vector(x, name: str = "x") -> np.ndarray:
    """Coerce to a finite 1-D float64 array."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidInput(f"{name} must be 1-D, got shape {x.shape}")
    if x.size == 0:
        raise InvalidInput(f"{name} must be non-empty")
    if not np.isfinite(x).all():
        raise InvalidInput(f"{name} contains non-finite entries")
    return x


def check_weights(a, name: str = "a") -> np.ndarray:
    """Validate a probability vector: strictly positive, sums to 1."""
    a = as_vector(a, name)
    if (a <= 0).any():
        raise InvalidInput(f"{name} must be strictly positive")
    s = a.sum()
    if abs(s - 1.0) > WEIGHT_SUM_TOL:
        raise InvalidInput(f"{name} must sum to 1 (got {s!r})")
    return a


def check_increasing(v, name: str = "v", strict: bool = True) -> np.ndarray:
    v = as_vector(v, name)
    d = np.diff(v)
    if strict and (d <= 0).any():
        raise InvalidInput(f"{name} must be strictly increasing")
    if not strict and (d < 0).any():
        raise InvalidInput(f"{name} must be non-decreasing")
    return v


def check_matrix(X, name: str = "X", nonnegative: bool = False) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise InvalidInput(f"{name} must be 2-D, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise InvalidInput(f"{name} contains non-finite entries")
    if nonnegative and (X < 0).any():
        raise InvalidInput(f"{name} must be nonnegative")
    return X


def check_positive(value, name: str) -> float:
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise InvalidInput(f"{name} must be a positive finite number, got {value!r}")
    return value
