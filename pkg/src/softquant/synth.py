"""Synthetic data: a low-rank nonnegative product pushed through per-row
ground-truth quantile transforms, plus optional censored Gaussian noise.

All randomness flows from one seeded PCG64 generator (numpy's default).  To
keep the construction reproducible across implementations, the draws are
documented transforms of that stream: Poisson entries by CDF inversion of a
single uniform, Dirichlet columns as normalized Gamma draws, and noise as
``max(sigma * N(0, 1), 0)`` elementwise.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import InvalidInput
from .operators import hard_quantile_normalize
from .params import quantiles_free

__all__ = ["SynthConfig", "GroundTruth", "synth_generate", "poisson_inversion"]


@dataclass
class SynthConfig:
    d: int = 160
    n: int = 80
    k: int = 8
    m_star: Optional[int] = None  # ground-truth quantile count; None = n
    poisson_lambda: float = 2.0
    dirichlet_alpha: float = 0.5
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if min(self.d, self.n, self.k) < 1:
            raise InvalidInput("dimensions must be positive")
        if self.m_star is not None and self.m_star < 1:
            raise InvalidInput("m_star must be positive")
        if min(self.poisson_lambda, self.dirichlet_alpha, self.noise_sigma) < 0:
            raise InvalidInput("lambda, alpha and sigma must be >= 0")


@dataclass
class GroundTruth:
    U: np.ndarray  # d x k
    V: np.ndarray  # k x n
    quantiles: np.ndarray  # d x m_star, increasing per row
    levels: np.ndarray  # m_star uniform quantile levels (cumulative)


def poisson_inversion(rng: np.random.Generator, lam: float, size) -> np.ndarray:
    """Poisson draws by inverting the CDF on one uniform per entry."""
    u = rng.random(size)
    out = np.zeros(u.shape, dtype=np.int64)
    p = np.full(u.shape, np.exp(-lam))
    cdf = p.copy()
    active = u > cdf
    k = 0
    while active.any():
        k += 1
        p[active] *= lam / k
        cdf[active] += p[active]
        out[active] = k
        active = u > cdf
    return out


def synth_generate(config: SynthConfig):
    """Generate ``(X, truth)``: X = hard-quantile-normalized U V plus noise.

    The ground-truth transform uses ``m_star`` quantiles from standard-normal
    precursors (cumulative sums of their exponentials) at uniform levels;
    with ``m_star == n`` and no noise each row of X is a permutation of the
    corresponding quantile row.
    """
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    m_star = cfg.n if cfg.m_star is None else cfg.m_star

    U = poisson_inversion(rng, cfg.poisson_lambda, (cfg.d, cfg.k)).astype(np.float64)
    gamma = rng.standard_gamma(cfg.dirichlet_alpha, size=(cfg.n, cfg.k))
    V = (gamma / gamma.sum(axis=1, keepdims=True)).T
    R_star = rng.standard_normal((cfg.d, m_star))
    Q_star = quantiles_free(R_star)

    W = U @ V
    X = np.empty_like(W)
    for i in range(cfg.d):
        X[i] = hard_quantile_normalize(W[i], Q_star[i])
    if cfg.noise_sigma > 0:
        X += np.maximum(cfg.noise_sigma * rng.standard_normal(X.shape), 0.0)

    levels = np.arange(1, m_star + 1) / m_star
    return X, GroundTruth(U=U, V=V, quantiles=Q_star, levels=levels)
