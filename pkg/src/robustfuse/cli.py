"""Command-line interface.

Two subcommands:

- ``fuse``: read a summary file (CSV or JSON), run the two-stage pipeline,
  print the fused estimate, and optionally write delimited reports plus a
  figure. Exit code 0 on convergence, 2 on non-convergence, 1 on input errors.
- ``simulate``: run a named simulation design (table1..table5) or the
  ``counterexample`` study, print a metrics table, and optionally write a
  metrics CSV plus a figure.
"""

from __future__ import annotations

import argparse
import csv
import sys

import numpy as np

from . import __version__
from .exceptions import FusionError, MissingCovarianceError, NotConvergedError
from .geomedian import GeoMedianConfig, solve_initial
from .inference import estimate_covariance, wald_interval
from .io import load_problem
from .model import IDENTITY, INVERSE_COVARIANCE
from .pivw import PenaltyConfig, SolverConfig, solve_penalized_ivw
from .simulate import (
    counterexample_median,
    design_preset,
    format_report,
    metrics_rows,
    run_replications,
    write_metrics_csv,
)

_DESIGNS = ("table1", "table2", "table3", "table4", "table5", "counterexample")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--lambda-c", type=float, default=1.0, metavar="C",
                        help="penalty scale: lambda = C / n (default 1.0)")
    parser.add_argument("--alpha", type=float, default=2.0,
                        help="adaptive weight exponent (default 2.0)")
    parser.add_argument("--vk", choices=(IDENTITY, INVERSE_COVARIANCE), default=IDENTITY,
                        help="weighting matrices: identity or inverse covariance (default identity)")
    parser.add_argument("--tol", type=float, default=None,
                        help="override solver tolerances (both stages)")
    parser.add_argument("--max-iter", type=int, default=None,
                        help="override iteration budgets (both stages)")
    parser.add_argument("--seed", type=int, default=7, help="random seed (simulate only)")
    parser.add_argument("--level", type=float, default=0.95,
                        help="confidence level for Wald intervals (default 0.95)")


def _configs(args):
    geo_kwargs = {}
    pen_kwargs = {"lambda_scale": args.lambda_c, "alpha": args.alpha}
    sol_kwargs = {}
    if args.tol is not None:
        geo_kwargs["tol"] = args.tol
        sol_kwargs["tol"] = args.tol
    if args.max_iter is not None:
        geo_kwargs["max_iter"] = args.max_iter
        sol_kwargs["max_sweeps"] = args.max_iter
    return GeoMedianConfig(**geo_kwargs), PenaltyConfig(**pen_kwargs), SolverConfig(**sol_kwargs)


def cmd_fuse(args) -> int:
    problem = load_problem(args.input, args.format, weighting=args.vk)
    geo_cfg, pen_cfg, sol_cfg = _configs(args)
    exit_code = 0
    try:
        pooled = solve_initial(problem, geo_cfg)
    except NotConvergedError as exc:
        print(f"warning: {exc}", file=sys.stderr)
        pooled = exc.result
        exit_code = 2
    try:
        fit = solve_penalized_ivw(problem, pooled, pen_cfg, sol_cfg)
    except NotConvergedError as exc:
        print(f"warning: {exc}", file=sys.stderr)
        fit = exc.result
        exit_code = 2

    lower = upper = None
    se = None
    if fit.selected:
        try:
            cov = estimate_covariance(problem, fit.selected)
            se = np.sqrt(np.diag(cov))
            lower, upper = wald_interval(fit.theta, cov, level=args.level)
        except MissingCovarianceError as exc:
            print(f"note: intervals skipped ({exc})", file=sys.stderr)

    ids = [s.source_id for s in problem.sources]
    bias_norms = (
        np.linalg.norm(fit.biases, axis=1) if fit.biases is not None else np.zeros(problem.K)
    )
    selected = set(fit.selected or ())

    print(f"sources: {problem.K}  dimension: {problem.d}  pooled n: {problem.n_total}  "
          f"weighting: {args.vk}")
    print(f"pooled median: {np.array2string(pooled.theta, precision=6)}")
    print(f"fused estimate: {np.array2string(fit.theta, precision=6)}")
    status = "converged" if fit.diagnostics.converged else "NOT converged"
    print(f"solver: {status} after {fit.diagnostics.iterations} sweeps "
          f"(residual {fit.diagnostics.residual:.2e})")
    kept = [ids[k] for k in sorted(selected)]
    print(f"pooled sources ({len(kept)}/{problem.K}): {', '.join(kept) if kept else '(none)'}")
    if lower is not None:
        level_pct = 100 * args.level
        for j in range(problem.d):
            print(f"  theta[{j + 1}] = {fit.theta[j]: .6g}  "
                  f"{level_pct:.0f}% CI [{lower[j]: .6g}, {upper[j]: .6g}]")

    if args.output:
        est_path = f"{args.output}.csv"
        with open(est_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["coordinate", "pooled", "estimate", "se", "lower", "upper"])
            for j in range(problem.d):
                writer.writerow([
                    j + 1,
                    repr(float(pooled.theta[j])),
                    repr(float(fit.theta[j])),
                    "" if se is None else repr(float(se[j])),
                    "" if lower is None else repr(float(lower[j])),
                    "" if upper is None else repr(float(upper[j])),
                ])
        src_path = f"{args.output}_sources.csv"
        weights = problem.weights()
        with open(src_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["source_id", "n", "weight", "bias_norm", "pooled"])
            for k, s in enumerate(problem.sources):
                writer.writerow([
                    s.source_id, s.n, repr(float(weights[k])),
                    repr(float(bias_norms[k])), int(k in selected),
                ])
        if not args.no_figure:
            from .plots import save_fuse_figure

            save_fuse_figure(problem, pooled.theta, fit, lower, upper, f"{args.output}.png")
            print(f"wrote {est_path}, {src_path}, {args.output}.png")
        else:
            print(f"wrote {est_path}, {src_path}")
    return exit_code


def cmd_simulate(args) -> int:
    if args.design == "counterexample":
        result = counterexample_median(args.K, args.n, args.tau, args.reps, args.seed)
        print(f"counterexample: K={result.K} n={result.n} tau={result.tau} "
              f"reps={result.replicates}")
        print(f"h(tau) = {result.h_star:.4f}  threshold = {result.threshold:.6f}")
        print(f"exceedance rate: {result.exceedance_rate:.3f}")
        if args.out:
            with open(args.out, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["K", "n", "tau", "replicates", "seed",
                                 "h_star", "threshold", "exceedance_rate"])
                writer.writerow([result.K, result.n, result.tau, result.replicates,
                                 result.seed, repr(result.h_star), repr(result.threshold),
                                 repr(result.exceedance_rate)])
            if not args.no_figure:
                from .plots import save_counterexample_figure

                fig_path = _figure_path(args.out)
                save_counterexample_figure(result, fig_path)
                print(f"wrote {args.out}, {fig_path}")
            else:
                print(f"wrote {args.out}")
        return 0

    geo_cfg, pen_cfg, sol_cfg = _configs(args)
    overrides = dict(
        replicates=args.reps,
        seed=args.seed,
        penalty=pen_cfg,
        geomedian=geo_cfg,
        solver=sol_cfg,
    )
    if args.design != "table5":
        overrides.update(d=args.d, K=args.K, n_star=args.nstar, weighting=args.vk)
    if args.bias_scale is not None:
        overrides["bias_scale"] = args.bias_scale
    design = design_preset(args.design, **overrides)
    report = run_replications(design)
    print(format_report(report))
    if args.out:
        write_metrics_csv(args.out, [report])
        if not args.no_figure:
            from .plots import save_metrics_figure

            fig_path = _figure_path(args.out)
            save_metrics_figure(report, fig_path)
            print(f"wrote {args.out}, {fig_path}")
        else:
            print(f"wrote {args.out}")
    return 0


def _figure_path(out_path: str) -> str:
    stem = out_path[:-4] if out_path.lower().endswith(".csv") else out_path
    return f"{stem}.png"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="robustfuse",
        description="Robust fusion of parameter estimates from multiple data sources.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    fuse = sub.add_parser("fuse", help="fuse a summary file into one estimate")
    fuse.add_argument("input", help="summary file (CSV or JSON)")
    fuse.add_argument("--format", choices=("csv", "json"), default=None,
                      help="input format (default: inferred from extension)")
    fuse.add_argument("--output", metavar="PREFIX", default=None,
                      help="write PREFIX.csv, PREFIX_sources.csv and PREFIX.png")
    fuse.add_argument("--no-figure", action="store_true", help="skip the figure")
    _add_common(fuse)
    fuse.set_defaults(func=cmd_fuse)

    sim = sub.add_parser("simulate", help="run a simulation design")
    sim.add_argument("design", choices=_DESIGNS)
    sim.add_argument("--d", type=int, default=3, help="parameter dimension (multiple of 3)")
    sim.add_argument("--K", type=int, default=10, help="number of sources (multiple of 10)")
    sim.add_argument("--nstar", type=int, default=100, help="per-source sample size")
    sim.add_argument("--reps", type=int, default=200, help="number of replicates")
    sim.add_argument("--bias-scale", type=float, default=None,
                     help="override the family's bias scale (0 for the zero-bias variant)")
    sim.add_argument("--n", type=int, default=10_000,
                     help="counterexample only: pooled sample size")
    sim.add_argument("--tau", type=float, default=0.1,
                     help="counterexample only: unbiased-majority margin")
    sim.add_argument("--out", metavar="PATH", default=None, help="write metrics CSV here")
    sim.add_argument("--no-figure", action="store_true", help="skip the figure")
    _add_common(sim)
    sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
