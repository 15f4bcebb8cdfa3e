"""Low-rank factorization under generalized KL with learned quantile transforms.

Three fitting routines share one loss:

* :func:`nmf_multiplicative` - the multiplicative-update baseline, which also
  serves as the rank-k projection of the bilevel scheme.
* :func:`qmf_train` - joint stochastic optimization of nonnegative factors
  (exponential precursors) and per-row quantile transforms applied to the
  reconstruction, ``KL(X, T(U V))``.
* :func:`qmfq_train` - the bilevel variant ``KL(X, T(P_k(T'(X))))`` where a
  free-quantile transform first deflates the data, an inner multiplicative-
  update loop projects it to rank k, and a pinned-quantile transform inflates
  the projection back to the data ranges.  Gradients flow through the inner
  loop by unrolling its iterations.

Per-row transport solves inside training are batched across the feature
dimension and warm-started between steps; their gradients come from the
implicit construction (an m-by-m solve per row) so memory stays independent
of the iteration counts.
"""

import time
import warnings
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import params
from .exceptions import InnerDivergence, InvalidInput, MaxIterExceeded, RowFailures
from .ot import anchor_grid, rescale_unit, solve_rows
from .validation import check_matrix

__all__ = [
    "TrainConfig",
    "PrecursorSet",
    "FactorPrecursors",
    "FactorModel",
    "LossCurve",
    "kl_div",
    "nmf_multiplicative",
    "qmf_loss_and_grad",
    "qmf_train",
    "qmfq_step",
    "qmfq_train",
    "reconstruct",
]

KL_FLOOR = 1e-12
# iteration budget for one-off cold solves (reconstruction, stateless
# gradients); training steps keep the tighter per-step cap and may skip rows
COLD_MAX_ITER = 200_000


@dataclass
class TrainConfig:
    rank: int = 8
    quantiles: int = 8
    epsilon: float = 0.01
    learning_rate: float = 0.01
    batch_size: Optional[int] = None
    epochs: int = 100
    inner_iters: int = 100
    seed: int = 0
    optimizer: str = "adam"
    train_weights: bool = True
    sinkhorn_tol: float = 1e-4
    sinkhorn_max_iter: int = 2000

    def __post_init__(self):
        for name in ("rank", "quantiles", "epochs", "inner_iters"):
            if getattr(self, name) < 1:
                raise InvalidInput(f"{name} must be positive")
        for name in ("epsilon", "learning_rate", "sinkhorn_tol"):
            if getattr(self, name) <= 0:
                raise InvalidInput(f"{name} must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise InvalidInput("batch_size must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidInput("optimizer must be 'adam' or 'sgd'")


@dataclass
class PrecursorSet:
    """Unconstrained parameters generating weights and quantiles per feature."""

    F: np.ndarray
    R: np.ndarray
    s: np.ndarray
    t: np.ndarray
    pinned: bool


@dataclass
class FactorPrecursors:
    log_u: np.ndarray
    log_v: np.ndarray


@dataclass
class LossCurve:
    epoch_kl: np.ndarray
    step_kl: np.ndarray
    seconds: np.ndarray
    final_kl: float
    mean_solver_iterations: float
    skipped_rows: int
    inner_kl: Optional[np.ndarray] = None  # (steps, 2): inner KL at start/end


@dataclass
class FactorModel:
    """Trained factors plus the quantile-transform parameters."""

    factors: FactorPrecursors
    inflate: PrecursorSet
    deflate: Optional[PrecursorSet]
    config: TrainConfig

    def factor_product(self) -> np.ndarray:
        return np.exp(self.factors.log_u) @ np.exp(self.factors.log_v)

    def weights(self) -> np.ndarray:
        return params.weights_from_precursor(self.inflate.F)

    def quantiles(self) -> np.ndarray:
        """Pinned quantile table; constant rows repeat their single value."""
        const = self.inflate.s == self.inflate.t
        m = self.inflate.F.shape[1]
        Q = np.empty((self.inflate.F.shape[0], m))
        live = ~const
        if live.any():
            Q[live] = params.quantiles_pinned(
                self.inflate.R[live], self.inflate.s[live], self.inflate.t[live]
            )
        Q[const] = self.inflate.s[const][:, None]
        return Q


def kl_div(X, Z, floor: float = KL_FLOOR) -> float:
    """Generalized KL: sum of X log(X/Z) - X + Z, with 0 log 0 = 0."""
    X = np.asarray(X, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    if (X < 0).any():
        raise InvalidInput("KL divergence needs nonnegative X")
    Zf = np.maximum(Z, floor)
    pos = X > 0
    logterm = np.zeros_like(X)
    logterm[pos] = X[pos] * np.log(X[pos] / Zf[pos])
    return float(logterm.sum() - X.sum() + Zf.sum())


def _kl_rows(X, Z, floor: float = KL_FLOOR) -> np.ndarray:
    Zf = np.maximum(Z, floor)
    pos = X > 0
    logterm = np.zeros_like(X)
    logterm[pos] = X[pos] * np.log(X[pos] / Zf[pos])
    return logterm.sum(axis=1) - X.sum(axis=1) + Zf.sum(axis=1)


def _nmf_init(X, rank: int, rng: np.random.Generator):
    scale = 2.0 * np.sqrt(max(X.mean(), KL_FLOOR) / rank)
    U = scale * rng.uniform(size=(X.shape[0], rank))
    V = scale * rng.uniform(size=(rank, X.shape[1]))
    return U, V


def _mu_step(X, U, V, floor):
    W = np.maximum(U @ V, floor)
    U = U * ((X / W) @ V.T) / np.maximum(V.sum(axis=1), floor)[None, :]
    W = np.maximum(U @ V, floor)
    V = V * (U.T @ (X / W)) / np.maximum(U.sum(axis=0), floor)[:, None]
    return U, V


def nmf_multiplicative(X, rank: int, iterations: int = 300, seed: int = 0, floor: float = KL_FLOOR):
    """Multiplicative updates for generalized KL; the loss never increases.

    Returns ``(U, V, kl_curve)`` with the KL value after every iteration.
    """
    X = check_matrix(X, "X", nonnegative=True)
    if rank < 1:
        raise InvalidInput("rank must be >= 1")
    U, V = _nmf_init(X, rank, np.random.default_rng(seed))
    curve = np.empty(int(iterations))
    for i in range(int(iterations)):
        U, V = _mu_step(X, U, V, floor)
        curve[i] = kl_div(X, U @ V, floor)
    return U, V, curve


def _mu_forward_tape(X, U0, V0, iterations, floor):
    """Multiplicative updates recording every iterate for the reverse pass."""
    Us, Vs = [U0], [V0]
    U, V = U0, V0
    for _ in range(iterations):
        U, V = _mu_step(X, U, V, floor)
        Us.append(U)
        Vs.append(V)
    return Us, Vs


def _mu_backward(X, Us, Vs, dU, dV, floor):
    """Reverse pass through the recorded multiplicative updates.

    Returns the cotangent of the factorized data matrix X; the cotangents of
    the (constant) initial factors are discarded.  Assumes the floors were
    inactive, which holds for strictly positive data and factors.
    """
    dX = np.zeros_like(X)
    ones_rows = np.ones((X.shape[0], 1))
    for i in range(len(Us) - 1, 0, -1):
        U_new, V_new = Us[i], Vs[i]
        U_old, V_old = Us[i - 1], Vs[i - 1]

        # V_new = V_old o N2 / D2 with N2 = U_new^T (X/W2), W2 = U_new V_old,
        # D2 = column sums of U_new
        W2 = np.maximum(U_new @ V_old, floor)
        A2 = X / W2
        D2 = np.maximum(U_new.sum(axis=0), floor)[:, None]
        N2 = U_new.T @ A2
        dV_old = dV * N2 / D2
        dN2 = dV * V_old / D2
        dD2 = -(dV * V_old * N2 / D2**2).sum(axis=1)
        dU_new = dU + ones_rows * dD2[None, :]
        dU_new += A2 @ dN2.T
        dA2 = U_new @ dN2
        dX += dA2 / W2
        dW2 = -dA2 * A2 / W2
        dU_new += dW2 @ V_old.T
        dV_old += U_new.T @ dW2

        # U_new = U_old o N1 / D1 with N1 = (X/W1) V_old^T, W1 = U_old V_old,
        # D1 = row sums of V_old
        W1 = np.maximum(U_old @ V_old, floor)
        A1 = X / W1
        D1 = np.maximum(V_old.sum(axis=1), floor)[None, :]
        N1 = A1 @ V_old.T
        dU_old = dU_new * N1 / D1
        dN1 = dU_new * U_old / D1
        dD1 = -(dU_new * U_old * N1 / D1**2).sum(axis=0)
        dV_old += dD1[:, None]
        dA1 = dN1 @ V_old
        dV_old += dN1.T @ A1
        dX += dA1 / W1
        dW1 = -dA1 * A1 / W1
        dU_old += dW1 @ V_old.T
        dV_old += U_old.T @ dW1

        dU, dV = dU_old, dV_old
    return dX


# ---------------------------------------------------------------------------
# batched quantile transform with implicit gradients


class _RowTransform:
    """One batched soft-quantile pass over rows, holding what backward needs."""

    __slots__ = (
        "out", "plan", "scaled", "span", "live", "skipped", "skipped_info",
        "f", "g", "iterations", "residual", "b", "q", "y", "epsilon", "n",
    )


def _transform_rows(Z, b, q, y, epsilon, tol, max_iter, warm=None, warm_rows=None):
    """Apply the soft quantile transform to every row of Z (batched).

    ``b`` and ``q`` are (B, m) stacks; rows whose values are all equal get the
    b-weighted mean of their quantiles.  Rows that fail to converge are
    reported in ``skipped`` and their plan left unused.  ``warm`` is an
    optional (f_buffer, g_buffer) pair indexed by ``warm_rows``.
    """
    B, n = Z.shape
    a = 1.0 / n
    tr = _RowTransform()
    tr.n = n
    tr.b, tr.q, tr.y, tr.epsilon = b, q, y, epsilon
    tr.scaled, _, tr.span = rescale_unit(Z)
    tr.out = np.empty_like(Z)
    degenerate = tr.span == 0
    if degenerate.any():
        tr.out[degenerate] = (b[degenerate] * q[degenerate]).sum(axis=1)[:, None]
    tr.live = np.flatnonzero(~degenerate)
    tr.skipped = np.empty(0, dtype=np.int64)
    tr.skipped_info = []
    tr.plan = None
    if tr.live.size == 0:
        tr.iterations = np.zeros(0, dtype=np.int64)
        tr.residual = np.zeros(0)
        return tr

    f0 = g0 = None
    if warm is not None:
        rows = tr.live if warm_rows is None else warm_rows[tr.live]
        f0, g0 = warm[0][rows], warm[1][rows]
    f, g, residual, iters, converged = solve_rows(
        tr.scaled[tr.live], a, b[tr.live], y, epsilon,
        tol=tol, max_iter=max_iter, f0=f0, g0=g0,
    )
    if warm is not None:
        rows = tr.live if warm_rows is None else warm_rows[tr.live]
        warm[0][rows] = f
        warm[1][rows] = g
    tr.f, tr.g, tr.iterations, tr.residual = f, g, iters, residual
    if not converged.all():
        bad = np.flatnonzero(~converged)
        tr.skipped = tr.live[bad]
        tr.skipped_info = [
            (int(tr.live[i]), float(residual[i]), int(iters[i])) for i in bad
        ]
        keep = np.flatnonzero(converged)
        tr.live = tr.live[keep]
        f, g = f[keep], g[keep]
        tr.f, tr.g = f, g
        tr.out[tr.skipped] = np.nan
        if tr.live.size == 0:
            return tr

    C = (tr.scaled[tr.live][:, :, None] - y[None, None, :]) ** 2
    P = np.exp((f[:, :, None] + g[:, None, :] - C) / epsilon)
    tr.plan = P
    Pn = P * (a / P.sum(axis=2))[:, :, None]
    tr.out[tr.live] = np.einsum("rij,rj->ri", Pn, q[tr.live]) / a
    return tr


def _transform_vjps(tr: _RowTransform, h, need_b: bool):
    """Cotangents of the batched transform: (dq, db, dZ) for live rows.

    ``h`` is the cotangent of ``tr.out`` (full B-row stack); returned arrays
    are full-size with zero rows where the transform was degenerate or
    skipped.  The dZ chain includes the per-row affine rescale, with the
    derivative of the row min/max locations taken at their first occurrence.
    """
    B = tr.out.shape[0]
    m = tr.b.shape[1]
    dq = np.zeros((B, m))
    db = np.zeros((B, m)) if need_b else None
    dZ = np.zeros((B, tr.n))
    a = 1.0 / tr.n

    degenerate = tr.span == 0
    if degenerate.any():
        hsum = h[degenerate].sum(axis=1)
        dq[degenerate] = tr.b[degenerate] * hsum[:, None]
        if need_b:
            db[degenerate] = tr.q[degenerate] * hsum[:, None]
    if tr.live.size == 0:
        return dq, db, dZ

    live = tr.live
    P = tr.plan
    hl = h[live] / a
    q = tr.q[live]
    dq[live] = np.einsum("rij,ri->rj", P, hl)

    # implicit plan gradients: reduced m-by-m solve per row
    H = hl[:, :, None] * q[:, None, :]
    HP = H * P
    z_f = HP.sum(axis=2)
    z_g = HP.sum(axis=1)
    M1 = P / P.sum(axis=2, keepdims=True)
    M1[:, 0, :] = 0.0
    M2T = P / P.sum(axis=1)[:, None, :]
    S = np.eye(m)[None] - np.matmul(M1.transpose(0, 2, 1), M2T)
    rhs = z_g - np.einsum("rij,ri->rj", M1, z_f)
    w_g = np.linalg.solve(S, rhs[..., None])[..., 0]
    w_f = z_f - np.einsum("rij,rj->ri", M2T, w_g)

    delta = 2.0 * (tr.scaled[live][:, :, None] - tr.y[None, None, :])
    u = (
        -(HP * delta).sum(axis=2)
        + w_f * (M1 * delta).sum(axis=2)
        + (M2T * delta * w_g[:, None, :]).sum(axis=2)
    ) / tr.epsilon

    if need_b:
        db[live] = w_g / tr.b[live]

    # affine rescale chain: interior entries scale by 1/span; the entries at
    # the row min and max collect the remainder
    span = tr.span[live]
    g = u / span[:, None]
    su = u.sum(axis=1)
    sux = (u * tr.scaled[live]).sum(axis=1)
    rows = np.arange(live.size)
    amin = tr.scaled[live].argmin(axis=1)
    amax = tr.scaled[live].argmax(axis=1)
    g[rows, amin] = (u[rows, amin] - su + sux) / span
    g[rows, amax] = (u[rows, amax] - sux) / span
    dZ[live] = g
    return dq, db, dZ


# ---------------------------------------------------------------------------
# optimizers


class _Sgd:
    def __init__(self, shapes, lr):
        self.lr = lr

    def step(self, values, grads):
        for key, g in grads.items():
            values[key] -= self.lr * g


class _Adam:
    def __init__(self, shapes, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}

    def step(self, values, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for key, g in grads.items():
            m = self.m[key]
            v = self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            values[key] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _make_optimizer(kind, shapes, lr):
    return _Adam(shapes, lr) if kind == "adam" else _Sgd(shapes, lr)


# ---------------------------------------------------------------------------
# QMF


def _qmf_batch(X, rows, values, s, t, y, cfg, warm, want_grad=True):
    """Loss and gradients of the QMF objective restricted to ``rows``.

    Returns ``(loss, grads, stats)``; gradients are dense arrays shaped like
    the full parameters, zero outside the batch.  Rows whose transport solve
    does not converge are skipped and reported in ``stats``.
    """
    U = np.exp(values["log_u"][rows])
    V = np.exp(values["log_v"])
    Z = U @ V
    b = params.weights_from_precursor(values["F"][rows])
    q = params.quantiles_pinned(values["R"][rows], s[rows], t[rows])
    tr = _transform_rows(
        Z, b, q, y, cfg.epsilon, cfg.sinkhorn_tol, cfg.sinkhorn_max_iter,
        warm=warm, warm_rows=rows,
    )
    ok = np.ones(rows.size, dtype=bool)
    ok[tr.skipped] = False
    Xb = X[rows]
    losses = np.zeros(rows.size)
    losses[ok] = _kl_rows(Xb[ok], tr.out[ok])
    loss = float(losses.sum())
    stats = {
        "iterations": tr.iterations,
        "skipped": rows[tr.skipped] if tr.skipped.size else np.empty(0, np.int64),
    }
    if not want_grad:
        return loss, None, stats

    out = np.where(ok[:, None], np.maximum(tr.out, KL_FLOOR), 1.0)
    h = np.where(ok[:, None], 1.0 - Xb / out, 0.0)
    dq, db, dZ = _transform_vjps(tr, h, need_b=cfg.train_weights)

    grads = {}
    grads["R"] = np.zeros_like(values["R"])
    grads["R"][rows] = params.vjp_quantiles_pinned(dq, values["R"][rows], s[rows], t[rows])
    if cfg.train_weights:
        grads["F"] = np.zeros_like(values["F"])
        grads["F"][rows] = params.vjp_weights(db, b)
    dU = dZ @ V.T
    grads["log_u"] = np.zeros_like(values["log_u"])
    grads["log_u"][rows] = dU * U
    grads["log_v"] = (U.T @ dZ) * V
    return loss, grads, stats


def qmf_loss_and_grad(X, model: FactorModel, feature_batch=None):
    """Objective value and parameter gradients on a subset of feature rows.

    Stateless (cold transport solves at the model's configured tolerance);
    gradients are returned for the precursors F, R, log_u, log_v.  Constant
    rows contribute zero loss and zero gradient.
    """
    X = check_matrix(X, "X", nonnegative=True)
    rows = (
        np.arange(X.shape[0])
        if feature_batch is None
        else np.asarray(feature_batch, dtype=np.int64)
    )
    rows = rows[model.inflate.s[rows] < model.inflate.t[rows]]
    values = {
        "F": model.inflate.F.copy(),
        "R": model.inflate.R.copy(),
        "log_u": model.factors.log_u.copy(),
        "log_v": model.factors.log_v.copy(),
    }
    cfg = replace(
        model.config,
        sinkhorn_max_iter=max(model.config.sinkhorn_max_iter, COLD_MAX_ITER),
    )
    y = anchor_grid(cfg.quantiles)
    loss, grads, stats = _qmf_batch(
        X, rows, values, model.inflate.s, model.inflate.t, y, cfg, warm=None
    )
    if stats["skipped"].size:
        warnings.warn(f"rows skipped (no convergence): {stats['skipped'].tolist()}")
    return loss, grads


def _constant_rows(s, t):
    return np.flatnonzero(s == t)


def qmf_train(X, config: TrainConfig):
    """Mini-batch training of factors and quantile transforms jointly.

    Deterministic given the seed.  Returns the trained model and the loss
    curve; ``curve.final_kl`` is recomputed from scratch at the final
    parameters through the same path :func:`reconstruct` uses.
    """
    X = check_matrix(X, "X", nonnegative=True)
    d, n = X.shape
    cfg = config
    if cfg.batch_size is not None and cfg.batch_size > d:
        raise InvalidInput("batch_size cannot exceed the number of rows")
    rng = np.random.default_rng(cfg.seed)
    s, t = X.min(axis=1), X.max(axis=1)
    # constant rows carry no trainable transform; their reconstruction is exact
    live = np.setdiff1d(np.arange(d), _constant_rows(s, t))

    m = cfg.quantiles
    log_u, log_v = params.init_factor_precursors(d, cfg.rank, n, rng)
    values = {
        "F": np.zeros((d, m)),
        "R": np.zeros((d, m - 1)),
        "log_u": log_u,
        "log_v": log_v,
    }
    y = anchor_grid(m)
    opt = _make_optimizer(cfg.optimizer, {k: v.shape for k, v in values.items()}, cfg.learning_rate)
    warm = (np.zeros((d, n)), np.zeros((d, m)))

    batch = live.size if cfg.batch_size is None else min(cfg.batch_size, live.size)
    step_kl, epoch_kl, seconds = [], [], []
    iter_sum, solve_count, skipped_total = 0, 0, 0
    t0 = time.perf_counter()
    snapshot = {k: v.copy() for k, v in values.items()}

    for _ in range(cfg.epochs):
        order = rng.permutation(live)
        diverged = False
        for start in range(0, live.size, batch):
            rows = np.sort(order[start : start + batch])
            loss, grads, stats = _qmf_batch(X, rows, values, s, t, y, cfg, warm)
            iter_sum += int(stats["iterations"].sum())
            solve_count += int(stats["iterations"].size)
            skipped_total += int(stats["skipped"].size)
            if not np.isfinite(loss):
                diverged = True
                break
            step_kl.append(loss)
            opt.step(values, grads)
        if diverged:
            values = snapshot
            warnings.warn("loss became non-finite; restored last epoch state")
            break
        snapshot = {k: v.copy() for k, v in values.items()}
        if batch == live.size:
            epoch_kl.append(step_kl[-1])
        else:
            full, _, stats = _qmf_batch(X, live, values, s, t, y, cfg, warm, want_grad=False)
            iter_sum += int(stats["iterations"].sum())
            solve_count += int(stats["iterations"].size)
            epoch_kl.append(full)
        seconds.append(time.perf_counter() - t0)

    model = FactorModel(
        factors=FactorPrecursors(values["log_u"], values["log_v"]),
        inflate=PrecursorSet(values["F"], values["R"], s, t, pinned=True),
        deflate=None,
        config=cfg,
    )
    final_kl = kl_div(X, reconstruct(model))
    curve = LossCurve(
        epoch_kl=np.asarray(epoch_kl),
        step_kl=np.asarray(step_kl),
        seconds=np.asarray(seconds),
        final_kl=final_kl,
        mean_solver_iterations=iter_sum / max(solve_count, 1),
        skipped_rows=skipped_total,
    )
    return model, curve


# ---------------------------------------------------------------------------
# QMFQ


def _deflate_forward(X_scaled, values, y, cfg, warm):
    """Free-quantile transform of the (pre-scaled) data rows.

    These rows feed the inner projection, so none may be skipped; the solve
    gets the cold iteration budget and failure is fatal.
    """
    b = params.weights_from_precursor(values["Fd"])
    q = params.quantiles_free(values["Rd"])
    d, n = X_scaled.shape
    a = 1.0 / n
    f, g, residual, iters, converged = solve_rows(
        X_scaled, a, b, y, cfg.epsilon,
        tol=cfg.sinkhorn_tol, max_iter=max(cfg.sinkhorn_max_iter, COLD_MAX_ITER),
        f0=warm[0], g0=warm[1],
    )
    warm[0][:], warm[1][:] = f, g
    if not converged.all():
        raise RowFailures(
            [
                (
                    int(i),
                    MaxIterExceeded(
                        "deflating transform did not converge",
                        residual=float(residual[i]),
                        iterations=int(iters[i]),
                    ),
                )
                for i in np.flatnonzero(~converged)
            ]
        )
    C = (X_scaled[:, :, None] - y[None, None, :]) ** 2
    P = np.exp((f[:, :, None] + g[:, None, :] - C) / cfg.epsilon)
    Pn = P * (a / P.sum(axis=2))[:, :, None]
    Y = np.einsum("rij,rj->ri", Pn, q) / a
    return Y, P, b, q, iters


def _deflate_vjps(P, b, q, hY, n, epsilon, train_weights):
    """Cotangents (dRd, dFd) of the deflating transform; data side is fixed."""
    a = 1.0 / n
    hl = hY / a
    dq = np.einsum("rij,ri->rj", P, hl)
    dFd = None
    if train_weights:
        m = b.shape[1]
        H = hl[:, :, None] * q[:, None, :]
        HP = H * P
        z_f = HP.sum(axis=2)
        z_g = HP.sum(axis=1)
        M1 = P / P.sum(axis=2, keepdims=True)
        M1[:, 0, :] = 0.0
        M2T = P / P.sum(axis=1)[:, None, :]
        S = np.eye(m)[None] - np.matmul(M1.transpose(0, 2, 1), M2T)
        rhs = z_g - np.einsum("rij,ri->rj", M1, z_f)
        w_g = np.linalg.solve(S, rhs[..., None])[..., 0]
        dFd = params.vjp_weights(w_g / b, b)
    return dq, dFd


def qmfq_step(X, X_scaled, rows, values, s, t, U0, V0, y, cfg, warm_d=None,
              warm_i=None, want_grad=True):
    """One bilevel evaluation: deflate, inner projection, inflate, backward.

    The outer loss is restricted to ``rows`` but the projection couples every
    feature, so deflate-side gradients are dense.  Returns
    ``(loss, grads, stats)`` where stats carries solver iteration counts,
    skipped rows, the inner start/end KL and the final inner factors.
    """
    d, n = X.shape
    if warm_d is None:
        warm_d = [np.zeros((d, n)), np.zeros((d, cfg.quantiles))]
    Y, Pd, bd, qd, iters_d = _deflate_forward(X_scaled, values, y, cfg, warm_d)

    Us, Vs = _mu_forward_tape(Y, U0, V0, cfg.inner_iters, KL_FLOOR)
    kl_start = kl_div(Y, Us[1] @ Vs[1])
    kl_end = kl_div(Y, Us[-1] @ Vs[-1])
    if kl_end > kl_start * (1 + 1e-9) + 1e-9:
        raise InnerDivergence(f"inner KL rose from {kl_start:.6g} to {kl_end:.6g}")
    Z = Us[-1] @ Vs[-1]

    b = params.weights_from_precursor(values["F"][rows])
    q = params.quantiles_pinned(values["R"][rows], s[rows], t[rows])
    tr = _transform_rows(
        Z[rows], b, q, y, cfg.epsilon, cfg.sinkhorn_tol, cfg.sinkhorn_max_iter,
        warm=warm_i, warm_rows=rows,
    )
    ok = np.ones(rows.size, dtype=bool)
    ok[tr.skipped] = False
    loss = float(_kl_rows(X[rows][ok], tr.out[ok]).sum())
    stats = {
        "iterations": int(iters_d.sum()) + int(tr.iterations.sum()),
        "solves": d + int(tr.iterations.size),
        "skipped": rows[tr.skipped] if tr.skipped.size else np.empty(0, np.int64),
        "inner_kl": (kl_start, kl_end),
        "factors": (Us[-1], Vs[-1]),
    }
    if not want_grad or not np.isfinite(loss):
        return loss, None, stats

    out = np.where(ok[:, None], np.maximum(tr.out, KL_FLOOR), 1.0)
    h = np.where(ok[:, None], 1.0 - X[rows] / out, 0.0)
    dq, db, dZ_rows = _transform_vjps(tr, h, need_b=cfg.train_weights)
    grads = {"R": np.zeros_like(values["R"])}
    grads["R"][rows] = params.vjp_quantiles_pinned(dq, values["R"][rows], s[rows], t[rows])
    if cfg.train_weights:
        grads["F"] = np.zeros_like(values["F"])
        grads["F"][rows] = params.vjp_weights(db, b)

    dZ = np.zeros_like(Z)
    dZ[rows] = dZ_rows
    dU = dZ @ Vs[-1].T
    dV = Us[-1].T @ dZ
    dY = _mu_backward(Y, Us, Vs, dU, dV, KL_FLOOR)
    dqd, dFd = _deflate_vjps(Pd, bd, qd, dY, n, cfg.epsilon, cfg.train_weights)
    grads["Rd"] = params.vjp_quantiles_free(dqd, values["Rd"])
    if cfg.train_weights:
        grads["Fd"] = dFd
    return loss, grads, stats


def qmfq_train(X, config: TrainConfig):
    """Bilevel training: deflate, project to rank k by inner updates, inflate.

    The inner multiplicative-update loop starts from the same fixed random
    factors at every outer step and is unrolled for the reverse pass.  The
    returned model stores the inner factors of the final parameters, so
    reconstruction does not need to rerun the inner loop.
    """
    X = check_matrix(X, "X", nonnegative=True)
    d, n = X.shape
    cfg = config
    s, t = X.min(axis=1), X.max(axis=1)
    if (s == t).any():
        raise InvalidInput("constant rows are not supported by the bilevel scheme")
    rng = np.random.default_rng(cfg.seed)
    m = cfg.quantiles
    values = {
        "F": np.zeros((d, m)),
        "R": np.zeros((d, m - 1)),
        "Fd": np.zeros((d, m)),
        "Rd": np.zeros((d, m)),
    }
    # fixed inner initialization: the same uniform draw at every outer step
    U0 = rng.uniform(size=(d, cfg.rank))
    V0 = rng.uniform(size=(cfg.rank, n))

    y = anchor_grid(m)
    X_scaled, _, _ = rescale_unit(X)
    opt = _make_optimizer(cfg.optimizer, {k: v.shape for k, v in values.items()}, cfg.learning_rate)
    warm_d = [np.zeros((d, n)), np.zeros((d, m))]
    warm_i = (np.zeros((d, n)), np.zeros((d, m)))

    batch = d if cfg.batch_size is None else min(cfg.batch_size, d)
    step_kl, epoch_kl, seconds, inner_kl = [], [], [], []
    iter_sum, solve_count, skipped_total = 0, 0, 0
    t0 = time.perf_counter()
    snapshot = {k: v.copy() for k, v in values.items()}
    diverged = False

    for _ in range(cfg.epochs):
        order = rng.permutation(d)
        for start in range(0, d, batch):
            rows = np.sort(order[start : start + batch])
            loss, grads, stats = qmfq_step(
                X, X_scaled, rows, values, s, t, U0, V0, y, cfg, warm_d, warm_i
            )
            iter_sum += stats["iterations"]
            solve_count += stats["solves"]
            skipped_total += int(stats["skipped"].size)
            inner_kl.append(stats["inner_kl"])
            if not np.isfinite(loss):
                diverged = True
                break
            step_kl.append(loss)
            opt.step(values, grads)
        if diverged:
            values = snapshot
            warnings.warn("loss became non-finite; restored last epoch state")
            break
        snapshot = {k: v.copy() for k, v in values.items()}
        if step_kl:
            epoch_kl.append(step_kl[-1])
        seconds.append(time.perf_counter() - t0)

    # freeze the projection of the final parameters (fresh solves, fixed init)
    Y, _, _, _, _ = _deflate_forward(
        X_scaled, values, y, cfg, [np.zeros((d, n)), np.zeros((d, m))]
    )
    Us, Vs = _mu_forward_tape(Y, U0, V0, cfg.inner_iters, KL_FLOOR)

    model = FactorModel(
        factors=FactorPrecursors(np.log(Us[-1]), np.log(Vs[-1])),
        inflate=PrecursorSet(values["F"], values["R"], s, t, pinned=True),
        deflate=PrecursorSet(values["Fd"], values["Rd"], s, t, pinned=False),
        config=cfg,
    )
    final_kl = kl_div(X, reconstruct(model))
    curve = LossCurve(
        epoch_kl=np.asarray(epoch_kl),
        step_kl=np.asarray(step_kl),
        seconds=np.asarray(seconds),
        final_kl=final_kl,
        mean_solver_iterations=iter_sum / max(solve_count, 1),
        skipped_rows=skipped_total,
        inner_kl=np.asarray(inner_kl),
    )
    return model, curve


def reconstruct(model: FactorModel, ranges=None) -> np.ndarray:
    """Inflate the factor product through the learned pinned quantiles.

    ``ranges`` optionally overrides the stored per-row (s, t).  Constant rows
    reproduce their value exactly.
    """
    cfg = model.config
    s, t = (model.inflate.s, model.inflate.t) if ranges is None else ranges
    Z = model.factor_product()
    d, n = Z.shape
    const = s == t
    out = np.empty((d, n))
    out[const] = s[const][:, None]
    live = np.flatnonzero(~const)
    if live.size:
        b = params.weights_from_precursor(model.inflate.F[live])
        q = params.quantiles_pinned(model.inflate.R[live], s[live], t[live])
        y = anchor_grid(cfg.quantiles)
        tr = _transform_rows(
            Z[live], b, q, y, cfg.epsilon, cfg.sinkhorn_tol,
            max(cfg.sinkhorn_max_iter, COLD_MAX_ITER),
        )
        if tr.skipped.size:
            raise RowFailures(
                [
                    (
                        int(live[i]),
                        MaxIterExceeded(
                            "reconstruction transform did not converge",
                            residual=res,
                            iterations=iters,
                        ),
                    )
                    for i, res, iters in tr.skipped_info
                ]
            )
        out[live] = tr.out
    return out
