"""Scikit-learn style estimators wrapping the functional training routines.

``KLNMF``, ``QMF`` and ``QMFQ`` are fit-shaped: ``fit(X)`` trains and stores
trailing-underscore attributes, ``reconstruct()`` rebuilds the approximation,
``score(X)`` is the negative generalized KL (higher is better).
``SoftQuantileNormalizer`` is a transformer applying a fixed target quantile
distribution to every row of its input.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import factorization as fz
from .operators import IterControl, TargetSpec, row_quantile_normalize
from .validation import check_matrix

__all__ = ["KLNMF", "QMF", "QMFQ", "SoftQuantileNormalizer"]


class _ReconstructingEstimator(BaseEstimator):
    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet")

    def reconstruct(self) -> np.ndarray:
        self._check_fitted()
        return fz.reconstruct(self.model_)

    def score(self, X, y=None) -> float:
        self._check_fitted()
        return -fz.kl_div(check_matrix(X, "X", nonnegative=True), self.reconstruct())


class KLNMF(BaseEstimator):
    """Multiplicative-update factorization under generalized KL."""

    def __init__(self, rank=8, iterations=300, seed=0):
        self.rank = rank
        self.iterations = iterations
        self.seed = seed

    def fit(self, X, y=None):
        X = check_matrix(X, "X", nonnegative=True)
        self.U_, self.V_, self.loss_curve_ = fz.nmf_multiplicative(
            X, self.rank, self.iterations, self.seed
        )
        self.kl_ = float(self.loss_curve_[-1])
        return self

    def reconstruct(self) -> np.ndarray:
        if not hasattr(self, "U_"):
            raise NotFittedError("KLNMF is not fitted yet")
        return self.U_ @ self.V_

    def score(self, X, y=None) -> float:
        return -fz.kl_div(check_matrix(X, "X", nonnegative=True), self.reconstruct())


class QMF(_ReconstructingEstimator):
    """Joint factorization and per-feature quantile transform."""

    def __init__(
        self,
        rank=8,
        quantiles=8,
        epsilon=0.01,
        learning_rate=0.01,
        batch_size=None,
        epochs=100,
        seed=0,
        optimizer="adam",
        train_weights=True,
    ):
        self.rank = rank
        self.quantiles = quantiles
        self.epsilon = epsilon
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.optimizer = optimizer
        self.train_weights = train_weights

    def _config(self) -> fz.TrainConfig:
        return fz.TrainConfig(
            rank=self.rank,
            quantiles=self.quantiles,
            epsilon=self.epsilon,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            optimizer=self.optimizer,
            train_weights=self.train_weights,
        )

    def fit(self, X, y=None):
        X = check_matrix(X, "X", nonnegative=True)
        self.model_, self.curve_ = fz.qmf_train(X, self._config())
        self.kl_ = self.curve_.final_kl
        return self


class QMFQ(QMF):
    """Bilevel variant: deflate, project to rank k, inflate back."""

    def __init__(
        self,
        rank=8,
        quantiles=8,
        epsilon=0.01,
        learning_rate=0.01,
        batch_size=None,
        epochs=100,
        inner_iters=100,
        seed=0,
        optimizer="adam",
        train_weights=True,
    ):
        super().__init__(
            rank=rank,
            quantiles=quantiles,
            epsilon=epsilon,
            learning_rate=learning_rate,
            batch_size=batch_size,
            epochs=epochs,
            seed=seed,
            optimizer=optimizer,
            train_weights=train_weights,
        )
        self.inner_iters = inner_iters

    def fit(self, X, y=None):
        X = check_matrix(X, "X", nonnegative=True)
        cfg = self._config()
        cfg.inner_iters = self.inner_iters
        self.model_, self.curve_ = fz.qmfq_train(X, cfg)
        self.kl_ = self.curve_.final_kl
        return self


class SoftQuantileNormalizer(BaseEstimator, TransformerMixin):
    """Row-wise soft quantile normalization toward fixed target quantiles.

    ``target_quantiles`` is either one increasing vector shared by all rows or
    a (d, m) table; ``target_weights`` defaults to uniform.
    """

    def __init__(self, target_quantiles, target_weights=None, epsilon=0.01,
                 tol=1e-6, max_iter=5000):
        self.target_quantiles = target_quantiles
        self.target_weights = target_weights
        self.epsilon = epsilon
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y=None):
        X = check_matrix(X, "X")
        q = np.asarray(self.target_quantiles, dtype=np.float64)
        if q.ndim == 1:
            q = np.broadcast_to(q, (X.shape[0], q.size))
        if q.shape[0] != X.shape[0]:
            raise ValueError("one quantile row required per data row")
        w = self.target_weights
        if w is None:
            w = np.full(q.shape[1], 1.0 / q.shape[1])
        w = np.asarray(w, dtype=np.float64)
        if w.ndim == 1:
            w = np.broadcast_to(w, q.shape)
        self.specs_ = [TargetSpec(w[i], q[i]) for i in range(q.shape[0])]
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "specs_"):
            raise NotFittedError("SoftQuantileNormalizer is not fitted yet")
        X = check_matrix(X, "X")
        control = IterControl.tolerance(self.tol, self.max_iter)
        return row_quantile_normalize(X, self.specs_, self.epsilon, control)
