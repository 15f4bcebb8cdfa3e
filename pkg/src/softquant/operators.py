"""Smoothed ranking, sorting and quantile-normalization operators.

Each operator transports a weighted value vector onto an ordered anchor grid
with an entropic-OT plan, then reads the output off the plan:

* rank:  ``n * (P_plus @ cumsum(b)) / a``  (entries in [0, n])
* sort:  ``(P_minus^T @ x) / b``           (non-decreasing, within [min x, max x])
* quantile-normalize: ``(P_plus @ q) / a`` (convex combinations of the target
  quantiles ``q``, order-consistent with the input)

Values are affinely rescaled to [0, 1] per row before the transport solve, so
a single smoothing level ``epsilon`` behaves comparably across features; sort
outputs are produced in original units by applying the (column-normalized)
plan to the unscaled values, which is equivalent because the read-out is a
convex combination.  Plans come either from a fixed number of scaling
iterations or from the log-domain solver run to tolerance, as selected by
:class:`IterControl`.  Either way the plan variant applied to the input is
exactly row- (or column-) stochastic, so range bounds and monotonicity hold
at round-off level at any iteration count, not only in the limit.
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import ot
from .exceptions import InvalidInput, MaxIterExceeded, RowFailures
from .utils import chunk_slices, map_ordered, worker_count
from .validation import as_vector, check_increasing, check_weights

__all__ = [
    "IterControl",
    "TargetSpec",
    "soft_rank",
    "soft_sort",
    "soft_quantile_normalize",
    "row_quantile_normalize",
    "hard_rank",
    "hard_sort",
    "hard_quantile_normalize",
]

DEFAULT_QUANTILE_COUNT = 16


@dataclass(frozen=True)
class IterControl:
    """Iteration policy: fixed scaling iterations, or log-domain to tolerance."""

    iterations: Optional[int] = None
    tol: float = 1e-6
    max_iter: int = 5000

    @classmethod
    def fixed(cls, iterations: int) -> "IterControl":
        return cls(iterations=iterations)

    @classmethod
    def tolerance(cls, tol: float = 1e-6, max_iter: int = 5000) -> "IterControl":
        return cls(tol=tol, max_iter=max_iter)


DEFAULT_CONTROL = IterControl()


@dataclass(frozen=True)
class TargetSpec:
    """Target quantile levels ``b``, quantile values ``q`` and anchor values ``y``.

    ``require_increasing=False`` relaxes strict monotonicity of ``q`` (used by
    tests exercising the constant-quantile limit).
    """

    b: np.ndarray
    q: np.ndarray
    y: Optional[np.ndarray] = None
    require_increasing: bool = True

    def __post_init__(self):
        object.__setattr__(self, "b", check_weights(self.b, "b"))
        q = check_increasing(self.q, "q", strict=self.require_increasing)
        object.__setattr__(self, "q", q)
        y = self.y
        if y is None:
            y = ot.anchor_grid(self.b.size)
        y = check_increasing(y, "y", strict=True)
        object.__setattr__(self, "y", y)
        if not (self.b.size == self.q.size == self.y.size):
            raise InvalidInput("b, q and y must have the same length")

    @classmethod
    def uniform(cls, q, **kwargs) -> "TargetSpec":
        q = np.asarray(q, dtype=np.float64)
        return cls(np.full(q.size, 1.0 / q.size), q, **kwargs)


def _plan_pair(a, x_scaled, b, y, epsilon, control: IterControl):
    """Both plan variants for one instance, per the iteration policy.

    In tolerance mode the converged plan is renormalized per axis, which is
    exactly one extra half-update of the corresponding scaling, restoring the
    exact-marginal guarantee of the fixed-iteration form.
    """
    if control.iterations is not None:
        state = ot.sinkhorn_scaling(a, x_scaled, b, y, epsilon, control.iterations)
        return ot.plan_plus(state), ot.plan_minus(state)
    sol = ot.log_sinkhorn(
        a, x_scaled, b, y, epsilon, tol=control.tol, max_iter=control.max_iter
    )
    plus = sol.plan * (a / sol.plan.sum(axis=1))[:, None]
    minus = sol.plan * (b / sol.plan.sum(axis=0))[None, :]
    return plus, minus


def _default_targets(b):
    if b is None:
        b = np.full(DEFAULT_QUANTILE_COUNT, 1.0 / DEFAULT_QUANTILE_COUNT)
    return check_weights(b, "b")


def soft_rank(a, x, b=None, y=None, epsilon=1e-2, control: IterControl = DEFAULT_CONTROL):
    """Smoothed ranks in [0, n], order-consistent with x."""
    a = check_weights(a, "a")
    x = as_vector(x, "x")
    b = _default_targets(b)
    y = ot.anchor_grid(b.size) if y is None else check_increasing(y, "y")
    scaled, _, _ = ot.rescale_unit(x[None, :])
    plus, _ = _plan_pair(a, scaled[0], b, y, epsilon, control)
    return x.size * (plus @ np.cumsum(b)) / a


def soft_sort(a, x, b=None, y=None, epsilon=1e-2, control: IterControl = DEFAULT_CONTROL):
    """Smoothed sorted values: non-decreasing, inside [min x, max x]."""
    a = check_weights(a, "a")
    x = as_vector(x, "x")
    b = _default_targets(b)
    y = ot.anchor_grid(b.size) if y is None else check_increasing(y, "y")
    scaled, _, _ = ot.rescale_unit(x[None, :])
    _, minus = _plan_pair(a, scaled[0], b, y, epsilon, control)
    return (minus.T @ x) / b


def soft_quantile_normalize(
    a, x, spec: TargetSpec, epsilon=1e-2, control: IterControl = DEFAULT_CONTROL
):
    """Replace each value by a convex combination of the target quantiles."""
    a = check_weights(a, "a")
    x = as_vector(x, "x")
    scaled, _, span = ot.rescale_unit(x[None, :])
    if span[0] == 0.0:
        return np.full(x.size, (spec.b * spec.q).sum())
    plus, _ = _plan_pair(a, scaled[0], spec.b, spec.y, epsilon, control)
    return (plus @ spec.q) / a


def _normalize_rows_batch(W, b, q, y, epsilon, control: IterControl, row_offset=0):
    """Tolerance-mode fast path: one stacked log-domain solve for many rows."""
    B, n = W.shape
    a = np.full(n, 1.0 / n)
    scaled, _, span = ot.rescale_unit(W)
    out = np.empty_like(W)
    live = np.flatnonzero(span > 0)
    for i in np.flatnonzero(span == 0):
        out[i] = (b[i] * q[i]).sum()
    if live.size == 0:
        return out
    f, g, residual, iterations, converged = ot.solve_rows(
        scaled[live], a, b[live], y, epsilon, tol=control.tol, max_iter=control.max_iter
    )
    if not converged.all():
        raise RowFailures(
            [
                (
                    int(live[i]) + row_offset,
                    MaxIterExceeded(
                        f"residual {residual[i]:.3e} > tol {control.tol:.1e}",
                        residual=float(residual[i]),
                        iterations=int(iterations[i]),
                    ),
                )
                for i in np.flatnonzero(~converged)
            ]
        )
    C = (scaled[live][:, :, None] - y[None, None, :]) ** 2
    P = np.exp((f[:, :, None] + g[:, None, :] - C) / epsilon)
    P *= (a / P.sum(axis=2))[:, :, None]
    for r, i in enumerate(live):
        out[i] = (P[r] @ q[i]) / a
    return out


def row_quantile_normalize(
    W,
    specs: Sequence[TargetSpec],
    epsilon=1e-2,
    control: IterControl = DEFAULT_CONTROL,
):
    """Apply the soft quantile operator to each row of W with its own target.

    Rows are independent; they are evaluated in parallel chunks capped by the
    SOFTQUANT_THREADS environment variable, and results do not depend on the
    chunking.  Failing rows are collected and re-raised together as
    :class:`RowFailures` carrying their row indices.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise InvalidInput(f"W must be 2-D, got shape {W.shape}")
    specs = list(specs)
    if len(specs) != W.shape[0]:
        raise InvalidInput(
            f"need one TargetSpec per row: {len(specs)} specs for {W.shape[0]} rows"
        )

    same_grid = all(
        s.b.size == specs[0].b.size and np.array_equal(s.y, specs[0].y) for s in specs
    )
    if control.iterations is None and same_grid:
        b = np.stack([s.b for s in specs])
        q = np.stack([s.q for s in specs])
        y = specs[0].y

        def run_chunk(sl):
            try:
                return _normalize_rows_batch(
                    W[sl], b[sl], q[sl], y, epsilon, control, row_offset=sl.start
                )
            except RowFailures as exc:
                return exc

        parts = map_ordered(run_chunk, chunk_slices(W.shape[0], worker_count()))
        failures = [
            pair for p in parts if isinstance(p, RowFailures) for pair in p.failures
        ]
        if failures:
            raise RowFailures(sorted(failures, key=lambda pair: pair[0]))
        return np.concatenate(parts, axis=0)

    a = np.full(W.shape[1], 1.0 / W.shape[1])

    def run_row(i):
        try:
            return soft_quantile_normalize(a, W[i], specs[i], epsilon, control)
        except Exception as exc:  # noqa: BLE001 - aggregated below
            return (i, exc)

    rows = map_ordered(run_row, range(W.shape[0]))
    failures = [r for r in rows if isinstance(r, tuple)]
    if failures:
        raise RowFailures(failures)
    return np.stack(rows)


def hard_rank(x) -> np.ndarray:
    """1-based ranks by argsort (ties broken by position)."""
    x = as_vector(x, "x")
    r = np.empty(x.size, dtype=np.int64)
    r[np.argsort(x, kind="stable")] = np.arange(1, x.size + 1)
    return r.astype(np.float64)


def hard_sort(x) -> np.ndarray:
    x = as_vector(x, "x")
    return np.sort(x)


def hard_quantile_normalize(x, q, b=None, a=None) -> np.ndarray:
    """Staircase quantile normalization: CDF lookup into the target quantiles.

    With uniform weights and len(q) == len(x) this reindexes q by the argsort
    of x.  The input CDF uses weights ``a`` and the target quantile function
    is the left-continuous staircase of (cumsum(b), q).
    """
    x = as_vector(x, "x")
    q = as_vector(q, "q")
    b = np.full(q.size, 1.0 / q.size) if b is None else check_weights(b, "b")
    a = np.full(x.size, 1.0 / x.size) if a is None else check_weights(a, "a")
    order = np.argsort(x, kind="stable")
    cdf = np.empty(x.size)
    cdf[order] = np.cumsum(a[order])
    levels = np.cumsum(b)
    levels[-1] = 1.0
    idx = np.searchsorted(levels, np.minimum(cdf, 1.0), side="left")
    return q[np.minimum(idx, q.size - 1)]
