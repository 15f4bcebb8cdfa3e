"""Command-line interface.

Subcommands: ``generate`` (synthetic data), ``factorize`` (nmf / qmf / qmfq),
``gradcheck`` (finite-difference suites), ``eval`` (KL of a saved model +
quantile-table export), ``bench`` (implicit vs unrolled gradient timings).

Exit codes: 0 success, 1 check failure, 2 usage error, 3 data error.
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import factorization as fz
from . import gradcheck, implicit, params
from .exceptions import InvalidInput, ParseError, RowFailures
from .io import load_matrix, load_report, save_matrix, save_report
from .operators import IterControl, TargetSpec, row_quantile_normalize
from .ot import TransportSolution, anchor_grid, plan_plus, sinkhorn_scaling
from .synth import SynthConfig, synth_generate

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3


def _cmd_generate(args) -> int:
    cfg = SynthConfig(
        d=args.d, n=args.n, k=args.k, m_star=args.m_star,
        poisson_lambda=args.poisson_lambda, dirichlet_alpha=args.dirichlet_alpha,
        noise_sigma=args.noise_sigma, seed=args.seed,
    )
    X, truth = synth_generate(cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_matrix(out / "X.csv", X)
    save_matrix(out / "true_u.csv", truth.U)
    save_matrix(out / "true_v.csv", truth.V)
    save_matrix(out / "true_quantiles.csv", truth.quantiles)
    save_report(out / "generate.json", {"config": vars(cfg), "m_star": truth.quantiles.shape[1]})
    print(f"wrote {out / 'X.csv'} ({X.shape[0]}x{X.shape[1]})")
    return EXIT_OK


def _train_config(args) -> fz.TrainConfig:
    return fz.TrainConfig(
        rank=args.rank,
        quantiles=args.quantiles,
        epsilon=args.epsilon,
        learning_rate=args.lr,
        batch_size=args.batch,
        epochs=args.epochs,
        inner_iters=args.inner_iters,
        seed=args.seed,
        optimizer=args.optimizer,
    )


def _cmd_factorize(args) -> int:
    X = load_matrix(args.input)
    t0 = time.perf_counter()
    report = {"method": args.method, "input": str(args.input)}
    out = Path(args.out)
    stem = out.with_suffix("")

    if args.method == "nmf":
        U, V, curve = fz.nmf_multiplicative(X, args.rank, args.epochs, args.seed)
        report["config"] = {"rank": args.rank, "iterations": args.epochs, "seed": args.seed}
        report["final_kl"] = float(curve[-1])
        report["epoch_kl"] = curve
        save_matrix(f"{stem}_u.csv", U)
        save_matrix(f"{stem}_v.csv", V)
        report["artifacts"] = {"u": f"{stem}_u.csv", "v": f"{stem}_v.csv"}
    else:
        cfg = _train_config(args)
        train = fz.qmf_train if args.method == "qmf" else fz.qmfq_train
        model, curve = train(X, cfg)
        report["config"] = {k: v for k, v in vars(cfg).items()}
        report["final_kl"] = curve.final_kl
        report["epoch_kl"] = curve.epoch_kl
        report["step_kl"] = curve.step_kl
        report["solver"] = {
            "mean_iterations": curve.mean_solver_iterations,
            "skipped_rows": curve.skipped_rows,
        }
        save_matrix(f"{stem}_weights.csv", model.weights())
        save_matrix(f"{stem}_quantiles.csv", model.quantiles())
        save_matrix(f"{stem}_u.csv", np.exp(model.factors.log_u))
        save_matrix(f"{stem}_v.csv", np.exp(model.factors.log_v))
        save_matrix(f"{stem}_ranges.csv", np.stack([model.inflate.s, model.inflate.t]))
        report["artifacts"] = {
            "weights": f"{stem}_weights.csv",
            "quantiles": f"{stem}_quantiles.csv",
            "u": f"{stem}_u.csv",
            "v": f"{stem}_v.csv",
            "ranges": f"{stem}_ranges.csv",
        }
        if args.method == "qmfq":
            save_matrix(f"{stem}_deflate_weights.csv",
                        params.weights_from_precursor(model.deflate.F))
            save_matrix(f"{stem}_deflate_quantiles.csv",
                        params.quantiles_free(model.deflate.R))
            report["artifacts"]["deflate_weights"] = f"{stem}_deflate_weights.csv"
            report["artifacts"]["deflate_quantiles"] = f"{stem}_deflate_quantiles.csv"
    report["seconds"] = time.perf_counter() - t0
    save_report(out, report)
    print(f"{args.method}: final KL {report['final_kl']:.6g} "
          f"({report['seconds']:.1f}s) -> {out}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    results, ok = gradcheck.run_all(args.seed)
    for suite, errs in results.items():
        bound = gradcheck.BOUNDS[suite][1]
        for name, err in errs.items():
            status = "ok" if err < bound else "FAIL"
            print(f"{suite}/{name}: max rel err {err:.3e} (bound {bound:.0e}) {status}")
    return EXIT_OK if ok else EXIT_CHECK


def _reconstruct_from_report(report: dict):
    method = report["method"]
    art = report["artifacts"]
    if method == "nmf":
        return load_matrix(art["u"]) @ load_matrix(art["v"])
    U = load_matrix(art["u"])
    V = load_matrix(art["v"])
    B = load_matrix(art["weights"])
    Q = load_matrix(art["quantiles"])
    ranges = load_matrix(art["ranges"])
    cfg = report["config"]
    s, t = ranges[0], ranges[1]
    Z = U @ V
    out = np.empty_like(Z)
    const = s == t
    out[const] = s[const][:, None]
    live = np.flatnonzero(~const)
    if live.size:
        y = anchor_grid(int(cfg["quantiles"]))
        specs = [TargetSpec(B[i], Q[i], y) for i in live]
        control = IterControl.tolerance(cfg["sinkhorn_tol"], int(cfg["sinkhorn_max_iter"]))
        out[live] = row_quantile_normalize(Z[live], specs, cfg["epsilon"], control)
    return out


def _cmd_eval(args) -> int:
    X = load_matrix(args.input)
    report = load_report(args.report)
    recon = _reconstruct_from_report(report)
    kl = fz.kl_div(X, recon)
    print(f"KL(X, reconstruction) = {kl:.6g}")
    if "final_kl" in report:
        print(f"reported final KL    = {report['final_kl']:.6g}")
    if args.out and report["method"] != "nmf":
        B = load_matrix(report["artifacts"]["weights"])
        Q = load_matrix(report["artifacts"]["quantiles"])
        levels = np.cumsum(B, axis=1)
        table = np.empty((B.shape[0], 2 * B.shape[1]))
        table[:, 0::2] = levels
        table[:, 1::2] = Q
        save_matrix(args.out, table)
        print(f"wrote level/quantile table -> {args.out}")
    return EXIT_OK


def _iterations_to_tol(a, x, b, y, epsilon, tol, cap=50_000) -> int:
    """Scaling iterations needed for the column-marginal residual to reach tol."""
    lo, hi = 1, 64
    while hi <= cap:
        state = sinkhorn_scaling(a, x, b, y, epsilon, hi)
        P = plan_plus(state)
        if np.abs(P.sum(axis=0) - b).max() < tol:
            break
        hi *= 2
    else:
        return cap
    while lo < hi:
        mid = (lo + hi) // 2
        state = sinkhorn_scaling(a, x, b, y, epsilon, mid)
        if np.abs(plan_plus(state).sum(axis=0) - b).max() < tol:
            hi = mid
        else:
            lo = mid + 1
    return hi


def bench_once(n: int, m: int, epsilon: float, tol: float, seed: int):
    """Time one implicit gradient against the unrolled tape at equal iterations.

    Both paths run the same number of scaling iterations; the implicit path
    keeps only the final plan (plus the m-by-m reduced system), the unrolled
    path stores and reverses the whole tape.
    """
    rng = np.random.default_rng(seed)
    a = np.full(n, 1.0 / n)
    b = np.full(m, 1.0 / m)
    x = rng.random(n)
    y = anchor_grid(m)
    H = rng.standard_normal((n, m))
    iters = _iterations_to_tol(a, x, b, y, epsilon, tol)

    t0 = time.perf_counter()
    state = sinkhorn_scaling(a, x, b, y, epsilon, iters)
    P = plan_plus(state)
    sol = TransportSolution(
        f=epsilon * np.log(state.u), g=epsilon * np.log(state.v), plan=P,
        epsilon=epsilon, residual=float(np.abs(P.sum(axis=0) - b).max()),
        iterations=iters, converged=True, tol=tol, a=a, b=b, x=x, y=y,
    )
    ws = implicit.build_workspace(sol)
    gx_implicit = implicit.vjp_plan_wrt_x(H, ws)
    t_implicit = time.perf_counter() - t0

    t0 = time.perf_counter()
    gx_unrolled = implicit.unrolled_plan_plus_vjp_x(H, a, x, b, y, epsilon, iters)
    t_unrolled = time.perf_counter() - t0
    gap = np.abs(gx_implicit - gx_unrolled).max()
    return iters, t_implicit, t_unrolled, gap


def _cmd_bench(args) -> int:
    print(f"{'n':>6} {'iters':>6} {'implicit(s)':>12} {'unrolled(s)':>12} {'speedup':>8}")
    rows = []
    for n in args.sizes:
        iters, ti, tu, gap = bench_once(n, args.quantiles, args.epsilon, args.tol, args.seed)
        print(f"{n:>6} {iters:>6} {ti:>12.4f} {tu:>12.4f} {tu / ti:>8.2f}")
        rows.append({"n": n, "iterations": iters, "implicit_s": ti,
                     "unrolled_s": tu, "speedup": tu / ti, "gradient_gap": gap})
    if args.out:
        save_report(args.out, {"m": args.quantiles, "epsilon": args.epsilon, "rows": rows})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="softquant", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--d", type=int, default=160)
    g.add_argument("--n", type=int, default=80)
    g.add_argument("--k", type=int, default=8)
    g.add_argument("--m-star", type=int, default=None)
    g.add_argument("--poisson-lambda", type=float, default=2.0)
    g.add_argument("--dirichlet-alpha", type=float, default=0.5)
    g.add_argument("--noise-sigma", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out-dir", default="data")
    g.set_defaults(func=_cmd_generate)

    f = sub.add_parser("factorize", help="fit nmf / qmf / qmfq")
    f.add_argument("--input", required=True)
    f.add_argument("--method", choices=("nmf", "qmf", "qmfq"), required=True)
    f.add_argument("--rank", type=int, default=8)
    f.add_argument("--quantiles", type=int, default=8)
    f.add_argument("--epsilon", type=float, default=0.01)
    f.add_argument("--lr", type=float, default=0.01)
    f.add_argument("--batch", type=int, default=None)
    f.add_argument("--epochs", type=int, default=100)
    f.add_argument("--inner-iters", type=int, default=100)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    f.add_argument("--out", default="report.json")
    f.set_defaults(func=_cmd_factorize)

    c = sub.add_parser("gradcheck", help="run the finite-difference suites")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=_cmd_gradcheck)

    e = sub.add_parser("eval", help="KL of a saved model; export quantile tables")
    e.add_argument("--input", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--out", default=None)
    e.set_defaults(func=_cmd_eval)

    b = sub.add_parser("bench", help="implicit vs unrolled gradient timings")
    b.add_argument("--sizes", type=int, nargs="+", default=[128, 256, 512, 1024])
    b.add_argument("--quantiles", type=int, default=10)
    b.add_argument("--epsilon", type=float, default=0.01)
    b.add_argument("--tol", type=float, default=1e-6)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default=None)
    b.set_defaults(func=_cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ParseError, FileNotFoundError, InvalidInput, RowFailures) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
