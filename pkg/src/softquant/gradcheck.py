"""Finite-difference verification suites for every analytic gradient.

Each suite sweeps seeded random instances, compares an analytic
vector-Jacobian product against central finite differences of the matching
forward function, and reports the worst relative error.  The CLI `gradcheck`
subcommand runs them all and fails when any worst error crosses its bound.
"""

import numpy as np

from . import factorization as fz
from . import implicit, params
from .ot import anchor_grid, log_sinkhorn, rescale_unit
from .validation import check_matrix

__all__ = [
    "check_plan_vjps",
    "check_param_vjps",
    "check_qmf_gradients",
    "check_qmfq_deflate_gradient",
    "run_all",
]

TIGHT = dict(tol=1e-11, max_iter=200_000)


def _rel(err: float, ref: float) -> float:
    return err / max(ref, 1e-12)


def check_plan_vjps(seed: int = 0, trials: int = 50, step: float = 1e-6) -> dict:
    """Implicit VJPs of the plan and quantile read-out vs finite differences."""
    rng = np.random.default_rng(seed)
    eps_pool = (0.05, 0.1, 0.5)
    worst = {"plan_x": 0.0, "plan_b": 0.0, "quantile_q": 0.0, "quantile_x": 0.0}
    for trial in range(trials):
        n = int(rng.integers(3, 9))
        m = int(rng.integers(2, 6))
        epsilon = eps_pool[trial % len(eps_pool)]
        a = rng.dirichlet(np.full(n, 5.0))
        b = rng.dirichlet(np.full(m, 5.0))
        x = rng.random(n)
        y = np.sort(rng.random(m))
        q = np.sort(rng.standard_normal(m)) * 2.0
        H = rng.standard_normal((n, m))
        h = rng.standard_normal(n)

        sol = log_sinkhorn(a, x, b, y, epsilon, **TIGHT)
        ws = implicit.build_workspace(sol)

        def plan_of_x(xv):
            return log_sinkhorn(a, xv, b, y, epsilon, **TIGHT).plan.ravel()

        J = implicit.finite_diff_oracle(plan_of_x, x, step)
        num = J.T @ H.ravel()
        ana = implicit.vjp_plan_wrt_x(H, ws)
        worst["plan_x"] = max(worst["plan_x"], _rel(np.abs(ana - num).max(), np.abs(num).max()))

        db = rng.standard_normal(m)
        db -= db.mean()
        hi = log_sinkhorn(a, x, b + step * db, y, epsilon, **TIGHT).plan
        lo = log_sinkhorn(a, x, b - step * db, y, epsilon, **TIGHT).plan
        num_dir = ((hi - lo) * H).sum() / (2 * step)
        ana_dir = implicit.vjp_plan_wrt_b(H, ws) @ db
        worst["plan_b"] = max(worst["plan_b"], _rel(abs(ana_dir - num_dir), abs(num_dir)))

        def tq(qv):
            return (sol.plan @ qv) / a

        Jq = implicit.finite_diff_oracle(tq, q, step)
        numq = Jq.T @ h
        anaq = implicit.vjp_quantile_wrt_q(h, sol)
        worst["quantile_q"] = max(
            worst["quantile_q"], _rel(np.abs(anaq - numq).max(), np.abs(numq).max())
        )

        def tx(xv):
            so = log_sinkhorn(a, xv, b, y, epsilon, **TIGHT)
            return (so.plan @ q) / a

        Jx = implicit.finite_diff_oracle(tx, x, step)
        numx = Jx.T @ h
        anax = implicit.vjp_quantile_wrt_x(h, ws, q)
        worst["quantile_x"] = max(
            worst["quantile_x"], _rel(np.abs(anax - numx).max(), np.abs(numx).max())
        )
    return worst


def check_param_vjps(seed: int = 0, trials: int = 200, step: float = 1e-6) -> dict:
    """Softmax / cumsum-exp / pinned-quantile / exp VJPs vs finite differences."""
    rng = np.random.default_rng(seed)
    worst = {"weights": 0.0, "quantiles_free": 0.0, "quantiles_pinned": 0.0, "factors": 0.0}
    for _ in range(trials):
        m = int(rng.integers(2, 7))
        c = rng.standard_normal(m)

        F = rng.standard_normal(m)
        J = implicit.finite_diff_oracle(params.weights_from_precursor, F, step)
        num = J.T @ c
        ana = params.vjp_weights(c, params.weights_from_precursor(F))
        worst["weights"] = max(worst["weights"], _rel(np.abs(ana - num).max(), np.abs(num).max()))

        R = rng.standard_normal(m)
        J = implicit.finite_diff_oracle(params.quantiles_free, R, step)
        num = J.T @ c
        ana = params.vjp_quantiles_free(c, R)
        worst["quantiles_free"] = max(
            worst["quantiles_free"], _rel(np.abs(ana - num).max(), np.abs(num).max())
        )

        Rp = rng.standard_normal(m)
        s, t = -0.7, 1.9
        cp = rng.standard_normal(m + 1)
        J = implicit.finite_diff_oracle(lambda r: params.quantiles_pinned(r, s, t), Rp, step)
        num = J.T @ cp
        ana = params.vjp_quantiles_pinned(cp, Rp, s, t)
        worst["quantiles_pinned"] = max(
            worst["quantiles_pinned"], _rel(np.abs(ana - num).max(), np.abs(num).max())
        )

        L = rng.standard_normal(m)
        J = implicit.finite_diff_oracle(np.exp, L, step)
        num = J.T @ c
        ana = params.vjp_factors(c, np.exp(L))
        worst["factors"] = max(worst["factors"], _rel(np.abs(ana - num).max(), np.abs(num).max()))
    return worst


def _random_qmf_model(rng, d, n, k, m, epsilon):
    cfg = fz.TrainConfig(
        rank=k, quantiles=m, epsilon=epsilon,
        sinkhorn_tol=1e-10, sinkhorn_max_iter=200_000,
    )
    X = rng.random((d, n)) * 3.0 + 0.5
    model = fz.FactorModel(
        factors=fz.FactorPrecursors(
            rng.normal(0.0, 0.4, (d, k)), rng.normal(0.0, 0.4, (k, n))
        ),
        inflate=fz.PrecursorSet(
            rng.normal(0.0, 0.3, (d, m)), rng.normal(0.0, 0.3, (d, m - 1)),
            X.min(axis=1), X.max(axis=1), pinned=True,
        ),
        deflate=None,
        config=cfg,
    )
    return X, model


def check_qmf_gradients(seed: int = 0, trials: int = 3, step: float = 1e-6) -> dict:
    """Composed objective gradients (all parameter blocks) vs finite differences."""
    rng = np.random.default_rng(seed)
    worst = {"F": 0.0, "R": 0.0, "log_u": 0.0, "log_v": 0.0}
    for _ in range(trials):
        X, model = _random_qmf_model(rng, d=4, n=6, k=2, m=3, epsilon=0.1)
        _, grads = fz.qmf_loss_and_grad(X, model)
        blocks = {
            "F": model.inflate.F,
            "R": model.inflate.R,
            "log_u": model.factors.log_u,
            "log_v": model.factors.log_v,
        }
        for name, block in blocks.items():
            num = np.zeros_like(block)
            flat = block.ravel()
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + step
                hi, _ = fz.qmf_loss_and_grad(X, model)
                flat[j] = orig - step
                lo, _ = fz.qmf_loss_and_grad(X, model)
                flat[j] = orig
                num.ravel()[j] = (hi - lo) / (2 * step)
            err = np.abs(grads[name] - num).max()
            worst[name] = max(worst[name], _rel(err, np.abs(num).max()))
    return worst


def check_qmfq_deflate_gradient(seed: int = 0, step: float = 1e-5) -> dict:
    """Gradients through the unrolled inner loop (deflate-side precursors)."""
    rng = np.random.default_rng(seed)
    d, n, k, m = 3, 5, 2, 3
    cfg = fz.TrainConfig(
        rank=k, quantiles=m, epsilon=0.1, inner_iters=5,
        sinkhorn_tol=1e-10, sinkhorn_max_iter=200_000,
    )
    X = check_matrix(rng.random((d, n)) * 2.0 + 0.5)
    s, t = X.min(axis=1), X.max(axis=1)
    values = {
        "F": rng.normal(0.0, 0.3, (d, m)),
        "R": rng.normal(0.0, 0.3, (d, m - 1)),
        "Fd": rng.normal(0.0, 0.3, (d, m)),
        "Rd": rng.normal(0.0, 0.3, (d, m)),
    }
    U0 = rng.uniform(0.2, 1.0, size=(d, k))
    V0 = rng.uniform(0.2, 1.0, size=(k, n))
    y = anchor_grid(m)
    X_scaled, _, _ = rescale_unit(X)
    rows = np.arange(d)

    def loss_at():
        loss, grads, _ = fz.qmfq_step(
            X, X_scaled, rows, values, s, t, U0, V0, y, cfg
        )
        return loss, grads

    base, grads = loss_at()
    worst = {}
    for name in ("Rd", "Fd"):
        block = values[name]
        num = np.zeros_like(block)
        flat = block.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi, _, _ = fz.qmfq_step(X, X_scaled, rows, values, s, t, U0, V0, y, cfg)
            flat[j] = orig - step
            lo, _, _ = fz.qmfq_step(X, X_scaled, rows, values, s, t, U0, V0, y, cfg)
            flat[j] = orig
            num.ravel()[j] = (hi - lo) / (2 * step)
        worst[name] = _rel(np.abs(grads[name] - num).max(), np.abs(num).max())
    return worst


BOUNDS = {
    "plan": ("check_plan_vjps", 1e-4),
    "params": ("check_param_vjps", 1e-5),
    "qmf": ("check_qmf_gradients", 1e-4),
    "qmfq": ("check_qmfq_deflate_gradient", 1e-3),
}


def run_all(seed: int = 0, trials_plan: int = 50, trials_params: int = 200):
    """Run every suite; returns (report dict, all_passed)."""
    results = {
        "plan": check_plan_vjps(seed, trials_plan),
        "params": check_param_vjps(seed, trials_params),
        "qmf": check_qmf_gradients(seed),
        "qmfq": check_qmfq_deflate_gradient(seed),
    }
    ok = True
    for suite, errs in results.items():
        bound = BOUNDS[suite][1]
        ok = ok and max(errs.values()) < bound
    return results, ok
