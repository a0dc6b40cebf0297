"""Compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--n 5000] [--repeat 3]

Prints the best wall time of each kernel under both backends and the
speed-up. Both backends get identical inputs; their outputs are checked
for equality before timing.
"""

import argparse
import math
import time

import numpy as np

from teakit import _kernels
from teakit.bart import BartConfig, bin_predictors, cut_grid, fit_bart
from teakit.matching import (Tolerances, confounder_metric, find_matches, nu_from_percentile,
                             omega_from_sd_fraction)
from teakit.simulate import generate_scenario, scenario


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def sweep_case(ds, n_trees, n_sweeps, seed=0):
    """A callable per backend running ``n_sweeps`` backfitting sweeps from the same state."""
    cfg = BartConfig(n_trees=n_trees)
    xs = np.ascontiguousarray(np.column_stack([ds.t1, ds.x]))
    y = ds.rates
    ys = (y - 0.5 * (y.min() + y.max())) / (y.max() - y.min())
    xb = bin_predictors(xs, cut_grid(xs, cfg.n_cuts))
    n_nodes = 2 ** (cfg.max_depth + 1) - 1
    p = cfg.alpha * (1.0 + np.arange(cfg.max_depth + 1)) ** -cfg.beta
    p[-1] = 0.0
    with np.errstate(divide="ignore"):
        logp = np.log(p)
    log1mp = np.log1p(-p)
    rng = np.random.default_rng(seed)
    draws = [(1.0 - rng.random((n_trees, 5)), rng.standard_normal((n_trees, 2 ** cfg.max_depth)))
             for _ in range(n_sweeps)]
    tau = 0.5 / (cfg.k * math.sqrt(n_trees))

    def make(kern):
        def run():
            status = np.zeros((n_trees, n_nodes), np.int8)
            status[:, 0] = 1
            var = np.zeros((n_trees, n_nodes), np.int32)
            cut = np.zeros((n_trees, n_nodes), np.int32)
            mu = np.zeros((n_trees, n_nodes))
            leaf_of = np.zeros((n_trees, ds.n), np.int64)
            tree_fit = np.zeros((n_trees, ds.n))
            total_fit = np.zeros(ds.n)
            counts = np.zeros(6, np.int64)
            for u, z in draws:
                kern.bart_sweep(xb, ys, status, var, cut, mu, leaf_of, tree_fit, total_fit,
                                0.2, tau, logp, log1mp, cfg.max_depth, cfg.p_grow, cfg.p_prune,
                                cfg.n_cuts, u, z, counts)
            return total_fit
        return run

    return make


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=5000, help="units in the synthetic dataset")
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--sweeps", type=int, default=20)
    args = ap.parse_args()
    if _kernels.compiled is None:
        raise SystemExit("the compiled extension is not built; nothing to compare")
    py, cy = _kernels.python, _kernels.compiled

    ds = generate_scenario(scenario("S1", n=args.n), seed=1).dataset
    m = confounder_metric(ds)
    tol = Tolerances(omega_from_sd_fraction(ds, 0.15), nu_from_percentile(ds, m, 10.0))
    z = m.whiten(ds.x)
    rows = []

    a = find_matches(ds, tol, m, backend="python")
    b = find_matches(ds, tol, m, backend="cython")
    assert np.array_equal(a.indptr, b.indptr) and np.array_equal(a.indices, b.indices)
    rows.append(("match sets (N=%d)" % ds.n,
                 best_of(lambda: find_matches(ds, tol, m, backend="python"), args.repeat),
                 best_of(lambda: find_matches(ds, tol, m, backend="cython"), args.repeat)))

    q = np.ascontiguousarray(ds.t2[:500])
    qz = np.ascontiguousarray(z[:500])
    pool = np.ascontiguousarray(ds.t1)
    assert np.array_equal(py.nearest_fallback(q, qz, pool, z, 5), cy.nearest_fallback(q, qz, pool, z, 5))
    rows.append(("fallback, 500 queries",
                 best_of(lambda: py.nearest_fallback(q, qz, pool, z, 5), args.repeat),
                 best_of(lambda: cy.nearest_fallback(q, qz, pool, z, 5), args.repeat)))

    make = sweep_case(ds, 50, args.sweeps)
    assert np.array_equal(make(py)(), make(cy)())
    rows.append((f"BART, {args.sweeps} sweeps x 50 trees",
                 best_of(make(py), args.repeat), best_of(make(cy), args.repeat)))

    bp = fit_bart(ds, BartConfig(n_trees=50, n_burn=20, n_keep=100), seed=0,
                  keep_train_fit=False)
    xs = np.ascontiguousarray(np.column_stack([ds.t2, ds.x]))
    assert np.array_equal(bp.predict_mean(xs, "python"), bp.predict_mean(xs, "cython"))
    rows.append(("forest predict, 100 draws",
                 best_of(lambda: bp.predict_mean(xs, "python"), args.repeat),
                 best_of(lambda: bp.predict_mean(xs, "cython"), args.repeat)))

    print(f"{'kernel':<32}{'python s':>12}{'cython s':>12}{'speed-up':>10}")
    for name, tp, tc in rows:
        print(f"{name:<32}{tp:>12.4f}{tc:>12.4f}{tp / tc:>9.1f}x")


if __name__ == "__main__":
    main()
