"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys

import numpy as np

from .bart import BartConfig, estimate_tea_bart, fit_bart
from .bootstrap import INTERVAL_METHOD, BootstrapConfig, bootstrap_tea
from .data import DatasetError, NumericalError
from .erf import erf_delta_events, erf_total
from .glm import PR_INTERVAL_METHOD, estimate_tea_poisson, fit_poisson, linear_design
from .harness import METHODS, HarnessConfig, OMEGA_FRACTIONS, parse_methods, run_study, summarize
from .io import load_csv, load_erf_csv, write_estimates, write_results
from .matching import (Tolerances, confounder_metric, estimate_tea_match1, estimate_tea_match_bc,
                       find_matches, nu_from_percentile, omega_from_sd_fraction)
from .simulate import scenario

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _add_tolerances(p, multi_omega=False):
    g = p.add_mutually_exclusive_group()
    if multi_omega:
        g.add_argument("--omega-frac", type=_floats, default=None,
                       help="comma-separated fractions of the counterfactual treatment sds "
                            "(default 0.1,0.15,0.25)")
    else:
        g.add_argument("--omega-frac", type=float, default=None,
                       help="treatment tolerance as a fraction of counterfactual sds (default 0.1)")
        g.add_argument("--omega", type=_floats, default=None,
                       help="explicit treatment tolerance vector, comma-separated")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--nu-pct", type=float, default=None,
                   help="confounder caliper as a percentile of pairwise distances (default 10)")
    g.add_argument("--nu", type=float, default=None, help="explicit confounder caliper")


def _add_bart(p):
    p.add_argument("--bart-trees", type=int, default=50)
    p.add_argument("--bart-burn", type=int, default=500)
    p.add_argument("--bart-keep", type=int, default=1000)
    p.add_argument("--bart-no-noise", action="store_true",
                   help="posterior draws of the mean only (no predictive noise)")


def _bart_config(args) -> BartConfig:
    return BartConfig(n_trees=args.bart_trees, n_burn=args.bart_burn, n_keep=args.bart_keep)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="teakit", description="Total events avoided under multivariate treatments.")
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("simulate", help="Monte Carlo study on a synthetic scenario")
    s.add_argument("--scenario", required=True, help="s1, s2 or s3")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--reps", type=int, default=None,
                   help="replications (default 200, or 50 when BART is included)")
    s.add_argument("--methods", default=",".join(METHODS))
    s.add_argument("--n-units", type=int, default=None)
    s.add_argument("--b-reps", type=int, default=100)
    s.add_argument("--c-fallback", type=int, default=5)
    s.add_argument("--no-intervals", action="store_true", help="skip matching bootstraps")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--format", choices=("text", "rows"), default="text")
    s.add_argument("--bias", choices=("abs_mean", "mean_abs"), default="abs_mean",
                   help="bias column in text output")
    s.add_argument("--out", default=None, help="output path (default stdout)")
    _add_tolerances(s, multi_omega=True)
    _add_bart(s)

    for name, helptext in (("estimate", "TEA estimates for a dataset file"),
                           ("bootstrap", "bootstrap interval for a matching estimate")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--input", required=True)
        e.add_argument("--seed", type=int, default=0)
        e.add_argument("--b-reps", type=int, default=100)
        e.add_argument("--c-fallback", type=int, default=5)
        e.add_argument("--format", choices=("text", "rows"), default="text")
        e.add_argument("--out", default=None)
        _add_tolerances(e)
        if name == "estimate":
            e.add_argument("--methods", default="match1,match2,pr1")
            e.add_argument("--no-intervals", action="store_true")
            _add_bart(e)
        else:
            e.add_argument("--method", choices=("match1", "match2"), default="match2")

    f = sub.add_parser("erf", help="traditional exposure-response calculation")
    f.add_argument("--input", required=True, help="CSV with beta,pi0,pop,delta_x")
    f.add_argument("--out", default=None)

    n = sub.add_parser("nu", help="confounder caliper from a distance percentile")
    n.add_argument("--input", required=True)
    n.add_argument("--pct", type=float, default=10.0)
    n.add_argument("--seed", type=int, default=0)

    o = sub.add_parser("omega", help="treatment tolerances from sd fractions")
    o.add_argument("--input", required=True)
    o.add_argument("--frac", type=float, default=0.1)
    return p


def _emit(text: str, out) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "w") as fh:
            fh.write(text)


def _tolerances(args, ds, metric) -> Tolerances:
    if args.omega is not None:
        omega = np.asarray(args.omega)
        if omega.size != ds.q_dim:
            raise UsageError(f"--omega needs {ds.q_dim} values, got {omega.size}")
    else:
        omega = omega_from_sd_fraction(ds, args.omega_frac if args.omega_frac is not None else 0.1)
    nu = args.nu if args.nu is not None else nu_from_percentile(
        ds, metric, args.nu_pct if args.nu_pct is not None else 10.0, seed=args.seed)
    return Tolerances(omega, nu)


def cmd_simulate(args) -> int:
    methods = parse_methods(args.methods)
    reps = args.reps if args.reps is not None else (50 if "bart" in methods else 200)
    if reps < 1:
        raise UsageError("--reps must be positive")
    sc = scenario(args.scenario)
    cfg = HarnessConfig(
        nu_mode="fixed" if args.nu is not None else "recompute",
        nu_pct=args.nu_pct if args.nu_pct is not None else 10.0,
        nu_value=args.nu if args.nu is not None else HarnessConfig.nu_value,
        b_reps=args.b_reps, c_fallback=args.c_fallback, intervals=not args.no_intervals,
        bart=_bart_config(args), bart_noise=not args.bart_no_noise, n_units=args.n_units)
    omegas = args.omega_frac if args.omega_frac is not None else OMEGA_FRACTIONS
    log = logging.getLogger("teakit")
    results = run_study(sc, omegas, methods, reps, args.seed, cfg, args.workers,
                        progress=lambda k, n: log.info("replication %d/%d", k, n))
    failed = {r.rep: r.failure for r in results if not r.ok}
    for rep, msg in sorted(failed.items()):
        print(f"warning: replication {rep} failed: {msg}", file=sys.stderr)
    table = summarize(results)
    write_results(table, args.out if args.out is not None else sys.stdout, args.format, args.bias)
    return EXIT_OK


def _estimate_records(args, ds) -> list[dict]:
    methods = parse_methods(args.methods)
    bad = [m for m in methods if m in ("match3", "pr2")]
    if bad:
        raise UsageError(f"{', '.join(bad)} need the true outcome model; only simulate supports them")
    metric = confounder_metric(ds)
    tol = _tolerances(args, ds, metric)
    ma = find_matches(ds, tol, metric)
    if ma.s == 0:
        raise DatasetError("no unit has a match at these tolerances; widen --omega/--nu")
    lin = linear_design(ds.q_dim, ds.p_dim)
    fit = fit_poisson(ds, lin) if {"match2", "pr1"} & set(methods) else None
    recs = []

    def rec(method, point, lo=math.nan, hi=math.nan, how=""):
        recs.append({"method": method, "point": point, "lower": lo, "upper": hi, "s": ma.s,
                     "n": ds.n, "s_over_n": ma.s / ds.n, "interval_method": how})

    for m in methods:
        if m in ("match1", "match2"):
            bc = lin if m == "match2" else None
            if args.no_intervals:
                r = estimate_tea_match1(ds, ma) if bc is None else estimate_tea_match_bc(ds, ma, fit)
                rec(m, r.tau_star)
            else:
                cfg = BootstrapConfig(tol, args.b_reps, args.c_fallback, bc, args.seed)
                r = bootstrap_tea(ds, ma, cfg, metric)
                rec(m, r.tau_star, *r.interval, INTERVAL_METHOD)
        elif m == "pr1":
            r = estimate_tea_poisson(ds, fit, ma.retained, seed=args.seed, method="pr1")
            rec(m, r.tau_star, *r.interval, PR_INTERVAL_METHOD)
        elif m == "bart":
            bp = fit_bart(ds, _bart_config(args), seed=args.seed, keep_train_fit=False)
            ti = estimate_tea_bart(ds, bp, ma.retained, not args.bart_no_noise, args.seed)
            rec(m, ti.point, ti.lower, ti.upper, "posterior predictive percentiles")
    return recs


def cmd_estimate(args) -> int:
    ds = load_csv(args.input)
    if ds.report.n_dropped:
        print(f"note: dropped {ds.report.n_dropped} of {ds.report.n_input} rows", file=sys.stderr)
    recs = _estimate_records(args, ds)
    write_estimates(recs, args.out if args.out is not None else sys.stdout, args.format)
    return EXIT_OK


def cmd_bootstrap(args) -> int:
    args.methods = args.method
    args.no_intervals = False
    return cmd_estimate(args)


def cmd_erf(args) -> int:
    cells = load_erf_csv(args.input)
    lines = ["beta,pi0,pop,delta_x,delta_y"]
    for c in cells:
        lines.append(f"{c.beta!r},{c.pi0!r},{c.pop!r},{c.delta_x!r},{erf_delta_events(c)!r}")
    lines.append(f"total,,,,{erf_total(cells)!r}")
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def cmd_nu(args) -> int:
    ds = load_csv(args.input)
    print(repr(nu_from_percentile(ds, confounder_metric(ds), args.pct, seed=args.seed)))
    return EXIT_OK


def cmd_omega(args) -> int:
    ds = load_csv(args.input)
    omega = omega_from_sd_fraction(ds, args.frac)
    print(",".join(repr(float(v)) for v in omega))
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "bootstrap": cmd_bootstrap,
            "erf": cmd_erf, "nu": cmd_nu, "omega": cmd_omega}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
