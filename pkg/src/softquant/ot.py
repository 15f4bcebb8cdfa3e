"""Entropic-regularized optimal transport between weighted values and an anchor grid.

Solves, for a weighted value vector ``(a, x)`` and a weighted ordered anchor
grid ``(b, y)``, the problem

    min_{P >= 0, P 1_m = a, P^T 1_n = b}  <P, C> - eps * H(P),

with ``C[i, j] = c(x_i, y_j)`` for a submodular cost ``c`` (squared difference
by default) and ``H`` the entropy of the plan.  Two solver forms are provided:

* :func:`sinkhorn_scaling` runs a fixed number of diagonal-scaling iterations
  and exposes *both* plan variants: :func:`plan_plus` (built from the latest
  row scaling, row sums exactly ``a``) and :func:`plan_minus` (built from the
  previous row scaling, column sums exactly ``b``).  The exact-marginal
  guarantee holds after any number of iterations, which is what makes the
  downstream smoothed operators honest convex combinations even far from
  convergence.
* :func:`log_sinkhorn` iterates the dual potentials with log-sum-exp updates
  until the column-marginal residual drops below a tolerance.  It never forms
  the Gibbs kernel explicitly and is therefore robust to small ``eps``.

Convention: :func:`softmin_eps` is the row-wise smoothed minimum
``softmin_eps(A)_i = -eps * log(sum_j exp(-A[i, j] / eps))``, computed with
per-row max subtraction.
"""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidInput, MaxIterExceeded, UnderflowError
from .validation import as_vector, check_increasing, check_positive, check_weights

__all__ = [
    "SquaredDifference",
    "DiscreteMeasure",
    "AnchorGrid",
    "ScalingState",
    "TransportSolution",
    "anchor_grid",
    "rescale_unit",
    "cost_matrix",
    "softmin_eps",
    "sinkhorn_scaling",
    "plan_plus",
    "plan_minus",
    "log_sinkhorn",
]


class SquaredDifference:
    """Cost c(x, y) = (x - y)^2.

    Submodular: the cross derivative d2c/dxdy = -2 < 0, which is what makes
    the transport plans co-monotone and the smoothed operators order
    preserving.
    """

    def pairwise(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return (x[..., :, None] - y[..., None, :]) ** 2

    def grad_x(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """d c(x_i, y_j) / d x_i, an n-by-m matrix."""
        return 2.0 * (x[..., :, None] - y[..., None, :])


SQUARED_DIFFERENCE = SquaredDifference()


@dataclass(frozen=True)
class DiscreteMeasure:
    """Weighted support of a 1-D empirical distribution (one matrix row)."""

    weights: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", check_weights(self.weights, "weights"))
        object.__setattr__(self, "values", as_vector(self.values, "values"))
        if self.weights.shape != self.values.shape:
            raise InvalidInput("weights and values must have the same length")

    @classmethod
    def uniform(cls, values) -> "DiscreteMeasure":
        values = as_vector(values, "values")
        return cls(np.full(values.size, 1.0 / values.size), values)


@dataclass(frozen=True)
class AnchorGrid:
    """Weighted, strictly increasing anchor values the input is transported onto."""

    weights: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", check_weights(self.weights, "weights"))
        object.__setattr__(
            self, "values", check_increasing(self.values, "values", strict=True)
        )
        if self.weights.shape != self.values.shape:
            raise InvalidInput("weights and values must have the same length")

    @classmethod
    def regular(cls, m: int, weights=None) -> "AnchorGrid":
        if weights is None:
            weights = np.full(m, 1.0 / m)
        return cls(weights, anchor_grid(m))


@dataclass
class ScalingState:
    """Scalings after a fixed number of kernel-scaling iterations.

    ``diag(u) K diag(v)`` has row sums exactly ``a``;
    ``diag(u_prev) K diag(v)`` has column sums exactly ``b``.
    """

    u: np.ndarray
    u_prev: np.ndarray
    v: np.ndarray
    kernel: np.ndarray
    a: np.ndarray
    b: np.ndarray
    iterations: int


@dataclass
class TransportSolution:
    """Converged dual potentials and plan of one entropic OT solve.

    The plan satisfies ``plan = exp((f + g^T - C) / epsilon)`` elementwise;
    ``residual`` is the sup-norm column-marginal error at exit.
    """

    f: np.ndarray
    g: np.ndarray
    plan: np.ndarray
    epsilon: float
    residual: float
    iterations: int
    converged: bool
    tol: float
    a: np.ndarray
    b: np.ndarray
    x: np.ndarray
    y: np.ndarray
    cost: object = field(default=SQUARED_DIFFERENCE, repr=False)


def anchor_grid(m: int) -> np.ndarray:
    """Regular grid of m anchor values in [0, 1]."""
    if m < 1:
        raise InvalidInput("anchor grid needs at least one point")
    if m == 1:
        return np.array([0.5])
    return np.linspace(0.0, 1.0, m)


def rescale_unit(x: np.ndarray):
    """Affinely map values to [0, 1] per row; returns (scaled, lo, span).

    Rows with all values equal are mapped to 0.5 with span 0, so downstream
    gradients through the affine map vanish for them (the transported output
    is constant in that case).
    """
    x = np.asarray(x, dtype=np.float64)
    lo = x.min(axis=-1, keepdims=True)
    hi = x.max(axis=-1, keepdims=True)
    span = hi - lo
    degenerate = span == 0
    safe = np.where(degenerate, 1.0, span)
    scaled = np.where(degenerate, 0.5, (x - lo) / safe)
    return scaled, np.squeeze(lo, -1), np.squeeze(np.where(degenerate, 0.0, span), -1)


def cost_matrix(x, y, cost=SQUARED_DIFFERENCE) -> np.ndarray:
    """Pairwise cost matrix C[i, j] = c(x_i, y_j)."""
    x = as_vector(x, "x")
    y = as_vector(y, "y")
    return cost.pairwise(x, y)


def _lse_last(A: np.ndarray) -> np.ndarray:
    """log(sum(exp(A), axis=-1)) with max subtraction."""
    M = A.max(axis=-1, keepdims=True)
    return M[..., 0] + np.log(np.exp(A - M).sum(axis=-1))


def softmin_eps(A, epsilon: float) -> np.ndarray:
    """Row-wise smoothed minimum: -eps * log(sum_j exp(-A[i, j] / eps))."""
    epsilon = check_positive(epsilon, "epsilon")
    A = np.asarray(A, dtype=np.float64)
    return -epsilon * _lse_last(-A / epsilon)


def sinkhorn_scaling(a, x, b, y, epsilon, iterations, cost=SQUARED_DIFFERENCE):
    """Run exactly ``iterations`` kernel-scaling iterations.

    Each iteration performs ``v <- b / (K^T u)`` then ``u <- a / (K v)``
    starting from ``u = 1``.  Returns the :class:`ScalingState` holding the
    final ``u``, the previous ``u`` and ``v``, from which both plan variants
    are built.

    Raises :class:`UnderflowError` when the kernel ``exp(-C/eps)`` degenerates
    (all-zero row or column) or the scalings leave the positive finite range;
    in that regime use :func:`log_sinkhorn` or a larger ``epsilon``.
    """
    a = check_weights(a, "a")
    b = check_weights(b, "b")
    x = as_vector(x, "x")
    y = as_vector(y, "y")
    epsilon = check_positive(epsilon, "epsilon")
    iterations = int(iterations)
    if iterations < 1:
        raise InvalidInput("iterations must be >= 1")
    if a.size != x.size or b.size != y.size:
        raise InvalidInput("weight/value lengths do not match")

    C = cost.pairwise(x, y)
    with np.errstate(all="ignore"):
        K = np.exp(-C / epsilon)
        if (K.sum(axis=1) == 0).any() or (K.sum(axis=0) == 0).any():
            raise UnderflowError(
                "Gibbs kernel underflowed to an empty row or column; "
                "use log_sinkhorn or increase epsilon"
            )
        u = np.ones(a.size)
        u_prev = u
        for _ in range(iterations):
            u_prev = u
            v = b / (K.T @ u_prev)
            u = a / (K @ v)
    for vec in (u, u_prev, v):
        if not (np.isfinite(vec).all() and (vec > 0).all()):
            raise UnderflowError(
                "scaling vectors left the positive finite range; "
                "use log_sinkhorn or increase epsilon"
            )
    return ScalingState(
        u=u, u_prev=u_prev, v=v, kernel=K, a=a, b=b, iterations=iterations
    )


def plan_plus(state: ScalingState) -> np.ndarray:
    """Plan from the latest row scaling; row sums equal ``a`` to round-off."""
    return state.u[:, None] * state.kernel * state.v[None, :]


def plan_minus(state: ScalingState) -> np.ndarray:
    """Plan from the previous row scaling; column sums equal ``b`` to round-off."""
    return state.u_prev[:, None] * state.kernel * state.v[None, :]


def solve_rows(
    x,
    a,
    b,
    y,
    epsilon,
    tol=1e-6,
    max_iter=5000,
    f0=None,
    g0=None,
    cost=SQUARED_DIFFERENCE,
):
    """Log-domain dual iterations on a stack of independent row problems.

    Parameters are broadcast over the leading (row) axis: ``x`` is ``(B, n)``,
    ``a`` is ``(B, n)`` or ``(n,)``, ``b`` is ``(B, m)`` or ``(m,)``, ``y`` is
    ``(m,)``.  The update order per iteration is the column-marginal update of
    ``g`` followed by the row-marginal update of ``f``, after which the
    column-sum residual is measured.  Rows are frozen individually as soon as
    their residual drops below ``tol``, so each row sees exactly the same
    iterates it would in a one-row solve.

    Returns ``(f, g, residual, iterations, converged)`` with per-row residuals,
    iteration counts and convergence flags.  Warm starts are supported through
    ``f0``/``g0``.
    """
    x = np.asarray(x, dtype=np.float64)
    B, n = x.shape
    y = np.asarray(y, dtype=np.float64)
    m = y.size
    a2 = np.broadcast_to(np.asarray(a, dtype=np.float64), (B, n))
    b2 = np.broadcast_to(np.asarray(b, dtype=np.float64), (B, m))
    epsilon = float(epsilon)

    C = (x[:, :, None] - y[None, None, :]) ** 2
    if not isinstance(cost, SquaredDifference):
        C = cost.pairwise(x, y)
    CT = np.ascontiguousarray(np.swapaxes(C, 1, 2))
    ela = epsilon * np.log(a2)
    elb = epsilon * np.log(b2)

    f = np.zeros((B, n)) if f0 is None else np.array(f0, dtype=np.float64)
    g = np.zeros((B, m)) if g0 is None else np.array(g0, dtype=np.float64)
    residual = np.full(B, np.inf)
    iterations = np.zeros(B, dtype=np.int64)
    active = np.ones(B, dtype=bool)

    it = 0
    while active.any() and it < max_iter:
        it += 1
        ix = np.flatnonzero(active)
        fa, ga = f[ix], g[ix]
        Ca, CTa = C[ix], CT[ix]
        ga = elb[ix] - epsilon * _lse_last((ga[:, :, None] + fa[:, None, :] - CTa) / epsilon) + ga
        fa = ela[ix] - epsilon * _lse_last((fa[:, :, None] + ga[:, None, :] - Ca) / epsilon) + fa
        col = np.exp((ga[:, :, None] + fa[:, None, :] - CTa) / epsilon).sum(axis=-1)
        res = np.abs(col - b2[ix]).max(axis=-1)
        f[ix], g[ix] = fa, ga
        residual[ix] = res
        iterations[ix] = it
        active[ix] = res >= tol

    return f, g, residual, iterations, ~active


def log_sinkhorn(
    a,
    x,
    b,
    y,
    epsilon,
    tol=1e-6,
    max_iter=5000,
    cost=SQUARED_DIFFERENCE,
    f0=None,
    g0=None,
) -> TransportSolution:
    """Solve one instance in the log domain to a column-marginal residual < tol.

    Raises :class:`MaxIterExceeded` (carrying the last residual) when the cap
    is reached first.  The returned plan is ``exp((f + g^T - C) / epsilon)``;
    its row sums match ``a`` to round-off of the final row update and its
    column sums match ``b`` within ``tol``.
    """
    a = check_weights(a, "a")
    b = check_weights(b, "b")
    x = as_vector(x, "x")
    y = as_vector(y, "y")
    epsilon = check_positive(epsilon, "epsilon")
    tol = check_positive(tol, "tol")
    if a.size != x.size or b.size != y.size:
        raise InvalidInput("weight/value lengths do not match")

    f, g, residual, iterations, converged = solve_rows(
        x[None, :],
        a[None, :],
        b[None, :],
        y,
        epsilon,
        tol=tol,
        max_iter=max_iter,
        f0=None if f0 is None else np.asarray(f0, dtype=np.float64)[None, :],
        g0=None if g0 is None else np.asarray(g0, dtype=np.float64)[None, :],
        cost=cost,
    )
    f, g = f[0], g[0]
    if not converged[0]:
        raise MaxIterExceeded(
            f"no convergence after {max_iter} iterations "
            f"(residual {residual[0]:.3e} > tol {tol:.1e})",
            residual=float(residual[0]),
            iterations=int(iterations[0]),
        )
    C = cost.pairwise(x, y)
    plan = np.exp((f[:, None] + g[None, :] - C) / epsilon)
    return TransportSolution(
        f=f,
        g=g,
        plan=plan,
        epsilon=epsilon,
        residual=float(residual[0]),
        iterations=int(iterations[0]),
        converged=True,
        tol=tol,
        a=a,
        b=b,
        x=x,
        y=y,
        cost=cost,
    )
