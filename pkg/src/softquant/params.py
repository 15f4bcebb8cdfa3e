"""Differentiable maps from unconstrained precursors to constrained quantities.

Weights come from a row-wise softmax, free quantiles from a row-wise
cumulative sum of exponentials, pinned quantiles from a softmax-cumsum scaled
into an exact [s, t] range, and nonnegative factors from elementwise
exponentials.  Every map ships with its transpose-Jacobian (``vjp_*``) so
training can chain cotangents back into precursor space.

All maps operate on the last axis and accept either a single row or a stack
of rows.
"""

import numpy as np

from .exceptions import InvalidRange

__all__ = [
    "weights_from_precursor",
    "quantiles_free",
    "quantiles_pinned",
    "vjp_weights",
    "vjp_quantiles_free",
    "vjp_quantiles_pinned",
    "vjp_factors",
    "init_factor_precursors",
]

EXP_OVERFLOW_LIMIT = 700.0


def weights_from_precursor(F) -> np.ndarray:
    """Softmax along the last axis, max-subtracted; output sums to 1."""
    F = np.asarray(F, dtype=np.float64)
    E = np.exp(F - F.max(axis=-1, keepdims=True))
    return E / E.sum(axis=-1, keepdims=True)


def quantiles_free(R) -> np.ndarray:
    """Strictly increasing positive values: cumulative sums of exp(R)."""
    R = np.asarray(R, dtype=np.float64)
    if (R > EXP_OVERFLOW_LIMIT).any():
        raise OverflowError(
            f"precursor entries above {EXP_OVERFLOW_LIMIT} overflow exp()"
        )
    return np.cumsum(np.exp(R), axis=-1)


def quantiles_pinned(R, s, t) -> np.ndarray:
    """Increasing quantiles whose first/last entries equal s and t exactly.

    ``R`` has one fewer column than the output; interior gaps are the softmax
    of ``R`` scaled by ``t - s``.
    """
    R = np.asarray(R, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if (s >= t).any():
        raise InvalidRange("pinned quantiles need s < t for every row")
    steps = np.cumsum(weights_from_precursor(R), axis=-1)
    span = (t - s)[..., None]
    q = np.concatenate(
        [np.broadcast_to(s[..., None], R.shape[:-1] + (1,)), s[..., None] + span * steps],
        axis=-1,
    )
    q[..., -1] = t
    return q


def vjp_weights(cotangent, weights) -> np.ndarray:
    """Softmax transpose-Jacobian; output is orthogonal to the all-ones vector."""
    c = np.asarray(cotangent, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    return w * (c - (w * c).sum(axis=-1, keepdims=True))


def _reverse_cumsum(c: np.ndarray) -> np.ndarray:
    return np.flip(np.cumsum(np.flip(c, axis=-1), axis=-1), axis=-1)


def vjp_quantiles_free(cotangent, R) -> np.ndarray:
    c = np.asarray(cotangent, dtype=np.float64)
    return np.exp(np.asarray(R, dtype=np.float64)) * _reverse_cumsum(c)


def vjp_quantiles_pinned(cotangent, R, s, t) -> np.ndarray:
    """Transpose-Jacobian of :func:`quantiles_pinned` with respect to R.

    The pinned endpoints contribute nothing: the first output is constant and
    the softmax annihilates the uniform component coming from the last one.
    """
    c = np.asarray(cotangent, dtype=np.float64)
    span = (np.asarray(t, dtype=np.float64) - np.asarray(s, dtype=np.float64))[..., None]
    u = _reverse_cumsum(span * c[..., 1:])
    return vjp_weights(u, weights_from_precursor(R))


def vjp_factors(cotangent, factors) -> np.ndarray:
    """Chain a factor-space cotangent back to its log-precursor."""
    return np.asarray(cotangent, dtype=np.float64) * np.asarray(factors, dtype=np.float64)


def init_factor_precursors(d: int, k: int, n: int, rng: np.random.Generator):
    """Log-precursors whose exponentials match uniform-random factors in scale.

    exp of Normal(mu, 0.5^2) with mu = log(0.5) - 0.125 has mean 0.5, the mean
    of a uniform draw on [0, 1).
    """
    mu = np.log(0.5) - 0.125
    log_u = rng.normal(mu, 0.5, size=(d, k))
    log_v = rng.normal(mu, 0.5, size=(k, n))
    return log_u, log_v
