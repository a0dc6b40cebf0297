"""Two-resample bootstrap for the matching estimators.

Each replicate resamples the retained units (whose effects are summed) and,
independently, the full sample (the pool of potential matches). A resampled
retained unit without a match in the pool falls back to a single nearest
neighbour, so no replicate trims anything.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from .data import Dataset
from .glm import design_matrix, fit_poisson, fit_poisson_arrays, term_names
from .matching import (MatchAssignment, MetricMatrix, TeaResult, Tolerances,
                       bias_corrected_e_hat, confounder_metric, estimate_tea_match1,
                       estimate_tea_match_bc, match_against_pool, treatment_metric)

INTERVAL_METHOD = "two-resample percentile bootstrap"


@dataclass(frozen=True)
class BootstrapConfig:
    tolerances: Tolerances
    b_reps: int = 100
    c_fallback: int = 5
    bias_correction: tuple | None = None
    seed: int = 0
    use_offset: bool = True

    def __post_init__(self):
        if self.b_reps < 2:
            raise ValueError("b_reps must be at least 2")
        if self.c_fallback < 1:
            raise ValueError("c_fallback must be at least 1")


class _Predictor:
    __slots__ = ("beta", "design", "use_offset")

    def __init__(self, beta, design, use_offset):
        self.beta = beta
        self.design = design
        self.use_offset = use_offset

    def predict_counts(self, t, x, pop):
        mu = np.exp(design_matrix(self.design, t, x) @ self.beta)
        return mu * pop if self.use_offset else mu


def replicate_matches(ds: Dataset, b1: np.ndarray, b2: np.ndarray, tol: Tolerances,
                      z: np.ndarray, tw: np.ndarray, c: int, backend=None):
    """Match sets of the ``b1`` draws within the ``b2`` pool, with fallback.

    Returns ``(indptr, units, n_fallback)``; ``units`` are dataset indices
    (a unit drawn k times into the pool appears as k distinct candidates).
    """
    indptr, pos = match_against_pool(ds.t2[b1], z[b1], ds.t1[b2], z[b2],
                                     tol.omega, tol.nu, backend)
    counts = np.diff(indptr)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        kern = _kernels.get(backend)
        pick = kern.nearest_fallback(
            _whiten_rows(ds.t2[b1[empty]], tw), np.ascontiguousarray(z[b1[empty]]),
            _whiten_rows(ds.t1[b2], tw), np.ascontiguousarray(z[b2]), int(c))
        counts = counts.copy()
        counts[empty] = 1
        new_indptr = np.zeros(len(counts) + 1, dtype=np.int64)
        np.cumsum(counts, out=new_indptr[1:])
        new_pos = np.empty(new_indptr[-1], dtype=np.int64)
        matched = np.flatnonzero(np.diff(indptr) > 0)
        # copy each matched row's block into its new slot
        starts = new_indptr[matched]
        lens = np.diff(indptr)[matched]
        dst = np.repeat(starts - indptr[matched], lens) + np.arange(indptr[-1])
        new_pos[dst] = pos
        new_pos[new_indptr[empty]] = pick
        indptr, pos = new_indptr, new_pos
    return indptr, b2[pos], int(empty.size)


def _whiten_rows(t: np.ndarray, chol: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(t @ chol)


def bootstrap_replicates(ds: Dataset, ma: MatchAssignment, cfg: BootstrapConfig,
                         designs: Sequence[tuple | None] = (None,),
                         metric: MetricMatrix | None = None,
                         t_metric: MetricMatrix | None = None,
                         backend=None, return_diagnostics: bool = False):
    """Replicate totals, shape ``(len(designs), b_reps)``.

    All designs share the same resamples and match sets; ``None`` means no
    bias correction. The regression of each design is refit on every pool
    resample.
    """
    out, diag = bootstrap_replicates_grid(ds, [(ma.retained, cfg.tolerances)], cfg, designs,
                                          metric, t_metric, backend)
    if return_diagnostics:
        return out[0], {k: v[0] for k, v in diag.items()}
    return out[0]


def bootstrap_replicates_grid(ds: Dataset, items: Sequence[tuple[np.ndarray, Tolerances]],
                              cfg: BootstrapConfig, designs: Sequence[tuple | None] = (None,),
                              metric: MetricMatrix | None = None,
                              t_metric: MetricMatrix | None = None, backend=None):
    """Replicates for several ``(retained, tolerances)`` pairs at once.

    Replicate ``b`` draws its pool from the stream ``(seed, b, 0)`` and its
    retained resample from ``(seed, b, 1)``, so each pair gets exactly the
    replicates it would get on its own while the regression refits on the
    shared pool are done once. Returns ``(totals, diagnostics)`` with totals
    of shape ``(len(items), len(designs), b_reps)``.
    """
    for retained, _ in items:
        if len(retained) == 0:
            raise ValueError("no retained units to bootstrap")
    metric = metric if metric is not None else confounder_metric(ds)
    t_metric = t_metric if t_metric is not None else treatment_metric(ds)
    z = metric.whiten(ds.x)
    tw = t_metric.chol
    n = ds.n
    pop = ds.pop.astype(np.float64)
    log_pop = np.log(pop)
    rates = ds.rates
    full_x = {d: design_matrix(d, ds.t1, ds.x) for d in designs if d is not None}
    n_items, n_b = len(items), cfg.b_reps
    out = np.empty((n_items, len(designs), n_b))
    n_fallback = np.zeros((n_items, n_b), dtype=np.int64)
    min_matches = np.zeros((n_items, n_b), dtype=np.int64)
    for b in range(n_b):
        b2 = np.random.default_rng(np.random.SeedSequence([cfg.seed, b, 0])).integers(0, n, size=n)
        predictors = {}
        for d in full_x:
            off = log_pop[b2] if cfg.use_offset else None
            beta = fit_poisson_arrays(full_x[d][b2], ds.y[b2], off, names=term_names(d))[0]
            predictors[d] = _Predictor(beta, d, cfg.use_offset)
        for k, (retained, tol) in enumerate(items):
            s = len(retained)
            rng1 = np.random.default_rng(np.random.SeedSequence([cfg.seed, b, 1]))
            b1 = np.asarray(retained)[rng1.integers(0, s, size=s)]
            indptr, units, n_fallback[k, b] = replicate_matches(
                ds, b1, b2, tol, z, tw, cfg.c_fallback, backend)
            counts = np.diff(indptr)
            min_matches[k, b] = counts.min()
            y1 = ds.y[b1]
            for j, d in enumerate(designs):
                if d is None:
                    owner = np.repeat(np.arange(s), counts)
                    mean_rate = np.bincount(owner, weights=rates[units], minlength=s) / counts
                    e_hat = pop[b1] * mean_rate
                else:
                    e_hat = bias_corrected_e_hat(ds.t2[b1], ds.x[b1], pop[b1], ds.x, indptr,
                                                 units, rates, predictors[d])
                out[k, j, b] = float(np.sum(e_hat - y1))
    return out, {"n_fallback": n_fallback, "min_matches": min_matches}


def percentile_interval(replicates: np.ndarray, level: float = 0.95) -> tuple[float, float]:
    a = 100 * (1 - level) / 2
    lo, hi = np.percentile(replicates, [a, 100 - a])
    return float(lo), float(hi)


def bootstrap_tea(ds: Dataset, ma: MatchAssignment, cfg: BootstrapConfig,
                  metric: MetricMatrix | None = None, t_metric: MetricMatrix | None = None,
                  backend=None) -> TeaResult:
    """Point estimate on the original sample plus a 95% percentile interval."""
    if ma.s == 0:
        raise ValueError("no retained units to bootstrap")
    if cfg.bias_correction is None:
        point = estimate_tea_match1(ds, ma)
    else:
        mu_hat = fit_poisson(ds, cfg.bias_correction, use_offset=cfg.use_offset)
        point = estimate_tea_match_bc(ds, ma, mu_hat)
    reps = bootstrap_replicates(ds, ma, cfg, (cfg.bias_correction,), metric, t_metric,
                                backend)[0]
    lo, hi = percentile_interval(reps)
    return point.with_interval(lo, hi, INTERVAL_METHOD, reps)
