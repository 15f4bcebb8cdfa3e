"""Reverse-mode gradients of converged transport plans via implicit differentiation.

Differentiating the dual first-order conditions of the entropic OT problem
turns every vector-Jacobian product into one dense m-by-m solve plus a few
elementwise products: memory stays O(nm) no matter how many iterations the
forward solve took.  With row/column-normalized kernels ``M1`` and ``M2``
built from the converged plan ``P`` (first row of ``M1`` zeroed to pin the
dual gauge), the reduced system matrix is ``S = I_m - M1^T M2^T``, and for a
plan cotangent ``H``:

    z_f = (H o P) 1_m,   z_g = (H o P)^T 1_n,
    w_g = S^{-1} (z_g - M1^T z_f),   w_f = z_f - M2^T w_g,
    J_x^T H = [ -(H o P o D) 1_m + w_f o (M1 o D) 1_m + (M2^T o D) w_g ] / eps,
    J_b^T H = w_g / b,

where ``D[i, j] = dc(x_i, y_j)/dx_i`` is the n-by-m cost-derivative matrix.
Sign and scale conventions are pinned by the finite-difference suites in the
tests: both dual-potential terms of the x-gradient carry the same 1/eps
prefactor as the direct cost term, and the b-gradient is ``w_g / b``
elementwise (its pairing is meaningful along sum-zero directions of ``b``;
callers project accordingly).

The unrolled tape-based gradient at the bottom of this module is a test and
benchmarking device only: it stores every scaling iterate, which is exactly
the memory cost the implicit path avoids.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .exceptions import InvalidInput, SingularSchur
from .ot import SQUARED_DIFFERENCE, TransportSolution

__all__ = [
    "VjpWorkspace",
    "build_workspace",
    "vjp_plan_wrt_x",
    "vjp_plan_wrt_b",
    "vjp_quantile_wrt_q",
    "vjp_quantile_wrt_x",
    "finite_diff_oracle",
    "unrolled_plan_plus_vjp_x",
]


@dataclass
class VjpWorkspace:
    """Factorized quantities reused by every VJP evaluation on one solution."""

    plan: np.ndarray
    M1: np.ndarray
    M2: np.ndarray
    delta: np.ndarray
    schur: np.ndarray
    schur_lu: tuple
    epsilon: float
    a: np.ndarray
    b: np.ndarray
    f: np.ndarray
    g: np.ndarray


def build_workspace(solution: TransportSolution, cost=None) -> VjpWorkspace:
    """Prepare the reduced linear system from a converged solution.

    The potentials are shifted so that ``f[0] = 0`` (the plan is invariant);
    the first row of ``M1`` is zeroed, which removes the redundant equation
    and makes the Schur matrix invertible.  Raises :class:`SingularSchur` if
    the LU factorization degenerates, and refuses non-converged solutions
    since the implicit construction is only valid at a fixed point.
    """
    if not solution.converged:
        raise InvalidInput(
            "implicit gradients need a converged solution "
            f"(residual {solution.residual:.3e})"
        )
    cost = solution.cost if cost is None else cost
    P = solution.plan
    f = solution.f - solution.f[0]
    g = solution.g + solution.f[0]
    M1 = P / P.sum(axis=1, keepdims=True)
    M1[0, :] = 0.0
    M2 = (P / P.sum(axis=0, keepdims=True)).T
    m = P.shape[1]
    S = np.eye(m) - M1.T @ M2.T
    if not np.isfinite(S).all():
        raise SingularSchur("reduced system matrix is not finite")
    lu, piv = scipy.linalg.lu_factor(S, check_finite=False)
    d = np.abs(np.diag(lu))
    if d.min() <= np.finfo(float).eps * max(1.0, d.max()):
        raise SingularSchur("reduced system matrix is numerically singular")
    delta = cost.grad_x(solution.x, solution.y)
    return VjpWorkspace(
        plan=P,
        M1=M1,
        M2=M2,
        delta=delta,
        schur=S,
        schur_lu=(lu, piv),
        epsilon=solution.epsilon,
        a=solution.a,
        b=solution.b,
        f=f,
        g=g,
    )


def _potentials(H: np.ndarray, ws: VjpWorkspace):
    """Solve the reduced system for the dual-potential cotangents (w_f, w_g)."""
    HP = H * ws.plan
    z_f = HP.sum(axis=1)
    z_g = HP.sum(axis=0)
    w_g = scipy.linalg.lu_solve(ws.schur_lu, z_g - ws.M1.T @ z_f, check_finite=False)
    w_f = z_f - ws.M2.T @ w_g
    return w_f, w_g


def vjp_plan_wrt_x(H, ws: VjpWorkspace) -> np.ndarray:
    """Transpose-Jacobian of the converged plan w.r.t. the input values."""
    H = np.asarray(H, dtype=np.float64)
    w_f, w_g = _potentials(H, ws)
    direct = -(H * ws.plan * ws.delta).sum(axis=1)
    pot_f = w_f * (ws.M1 * ws.delta).sum(axis=1)
    pot_g = (ws.M2.T * ws.delta) @ w_g
    return (direct + pot_f + pot_g) / ws.epsilon


def vjp_plan_wrt_b(H, ws: VjpWorkspace) -> np.ndarray:
    """Transpose-Jacobian of the plan w.r.t. the target weights, ambient coords."""
    H = np.asarray(H, dtype=np.float64)
    _, w_g = _potentials(H, ws)
    return w_g / ws.b


def vjp_quantile_wrt_q(h, solution: TransportSolution, a=None) -> np.ndarray:
    """Exact gradient in q of the quantile operator (P q) / a for fixed plan."""
    a = solution.a if a is None else np.asarray(a, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    return solution.plan.T @ (h / a)


def vjp_quantile_wrt_x(h, ws: VjpWorkspace, q, a=None) -> np.ndarray:
    """Full gradient in x of the quantile operator: chain rule through the plan."""
    a = ws.a if a is None else np.asarray(a, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    H = (h / a)[:, None] * q[None, :]
    return vjp_plan_wrt_x(H, ws)


def finite_diff_oracle(fn, point, step=1e-6) -> np.ndarray:
    """Central-difference Jacobian; column j differentiates coordinate j."""
    point = np.asarray(point, dtype=np.float64)
    cols = []
    for j in range(point.size):
        hi = point.copy()
        lo = point.copy()
        hi[j] += step
        lo[j] -= step
        cols.append((np.asarray(fn(hi)) - np.asarray(fn(lo))) / (2.0 * step))
    return np.stack(cols, axis=-1)


def unrolled_plan_plus_vjp_x(
    H, a, x, b, y, epsilon, iterations, cost=SQUARED_DIFFERENCE
) -> np.ndarray:
    """Gradient in x of <H, plan_plus> by reverse-mode through the scaling loop.

    Stores all iterates (O(iterations * (n + m)) memory) and walks the
    recurrence backwards.  Cross-checks the implicit path at small iteration
    counts and serves as the baseline in the speed/memory benchmark.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    C = cost.pairwise(x, y)
    K = np.exp(-C / epsilon)
    KD = K * cost.grad_x(x, y)

    us = [np.ones(a.size)]
    vs = [None]
    for _ in range(int(iterations)):
        v = b / (K.T @ us[-1])
        u = a / (K @ v)
        vs.append(v)
        us.append(u)

    u, v = us[-1], vs[-1]
    # plan_plus = u o K o v: seed the tape and collect the direct kernel term
    du = (H * K * v[None, :]).sum(axis=1)
    dv = (H * K * u[:, None]).sum(axis=0)
    dx = -(u / epsilon) * ((KD * H) @ v)

    for i in range(int(iterations), 0, -1):
        # u_i = a / (K v_i)
        t = -du * us[i] ** 2 / a
        dx += -(t / epsilon) * (KD @ vs[i])
        dv += K.T @ t
        # v_i = b / (K^T u_{i-1})
        s = -dv * vs[i] ** 2 / b
        dx += -(us[i - 1] / epsilon) * (KD @ s)
        du = K @ s
        dv = np.zeros_like(dv)
    return dx
