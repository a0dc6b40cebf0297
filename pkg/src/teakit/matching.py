"""Match-set construction and the matching estimators of total events avoided.

Unit ``i`` is matched to every unit ``j`` whose factual treatment lies
strictly inside the box ``|t2_i - t1_j| < omega`` and whose confounders lie
strictly within Mahalanobis distance ``nu`` of ``x_i``. Units without any
match are trimmed; the estimand becomes the sum over the retained units.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from scipy.spatial.distance import pdist

from . import _kernels
from .data import Dataset, NumericalError

__all__ = [
    "MetricMatrix", "Tolerances", "MatchAssignment", "TeaResult",
    "confounder_metric", "treatment_metric", "mahalanobis",
    "omega_from_sd_fraction", "nu_from_percentile", "find_matches",
    "match_against_pool", "estimate_tea_match1", "estimate_tea_match_bc",
    "true_tea_trimmed",
]


@dataclass(frozen=True, eq=False)
class MetricMatrix:
    """Positive definite matrix ``A`` defining ``||b|| = sqrt(b' A b)``."""

    a: np.ndarray
    chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        a = np.array(self.a, dtype=np.float64, ndmin=2)
        if a.shape[0] != a.shape[1]:
            raise ValueError("metric matrix must be square")
        if not np.allclose(a, a.T, rtol=0, atol=1e-10 * max(1.0, np.abs(a).max())):
            raise ValueError("metric matrix must be symmetric")
        a = 0.5 * (a + a.T)
        try:
            chol = np.linalg.cholesky(a)
        except np.linalg.LinAlgError:
            raise NumericalError("metric matrix is not positive definite") from None
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "chol", chol)

    @property
    def dim(self) -> int:
        return self.a.shape[0]

    def whiten(self, x: np.ndarray) -> np.ndarray:
        """Coordinates in which the metric is Euclidean (``x @ L``, ``A = L L'``)."""
        return np.ascontiguousarray(np.asarray(x, dtype=np.float64) @ self.chol)


@dataclass(frozen=True)
class Tolerances:
    omega: tuple[float, ...]
    nu: float

    def __post_init__(self):
        omega = tuple(float(w) for w in np.atleast_1d(self.omega))
        if not omega or any(not w > 0 for w in omega):
            raise ValueError(f"omega entries must be positive, got {omega}")
        if not self.nu > 0:
            raise ValueError(f"nu must be positive, got {self.nu}")
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "nu", float(self.nu))


@dataclass(frozen=True, eq=False)
class MatchAssignment:
    """Match sets in CSR form: matches of unit ``i`` are
    ``indices[indptr[i]:indptr[i + 1]]`` (ascending)."""

    indptr: np.ndarray
    indices: np.ndarray
    tolerances: Tolerances

    @property
    def n(self) -> int:
        return len(self.indptr) - 1

    @property
    def m(self) -> np.ndarray:
        return np.diff(self.indptr)

    @property
    def retained(self) -> np.ndarray:
        return np.flatnonzero(self.m > 0)

    @property
    def s(self) -> int:
        return int(np.count_nonzero(self.m))

    def matches(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    @property
    def phi(self) -> dict[int, list[int]]:
        return {i: self.matches(i).tolist() for i in range(self.n)}


@dataclass(frozen=True, eq=False)
class TeaResult:
    """Estimate of the trimmed total events avoided.

    ``per_unit_e_hat[k]`` is the estimated expected counterfactual count of
    unit ``retained[k]``.
    """

    method: str
    tau_star: float
    retained: np.ndarray
    per_unit_e_hat: np.ndarray
    n: int
    interval: tuple[float, float] | None = None
    level: float = 0.95
    interval_method: str | None = None
    replicates: np.ndarray | None = None

    @property
    def s(self) -> int:
        return len(self.retained)

    @property
    def s_over_n(self) -> float:
        return self.s / self.n

    def with_interval(self, lower, upper, interval_method, replicates=None) -> "TeaResult":
        return TeaResult(self.method, self.tau_star, self.retained, self.per_unit_e_hat,
                         self.n, (float(lower), float(upper)), self.level,
                         interval_method, replicates)


class CountPredictor(Protocol):
    def predict_counts(self, t: np.ndarray, x: np.ndarray, pop: np.ndarray) -> np.ndarray:
        ...


def _inverse_covariance(values: np.ndarray, ridge: float, what: str) -> MetricMatrix:
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] < 2:
        raise ValueError("need at least two units to estimate a covariance")
    cov = np.atleast_2d(np.cov(values, rowvar=False))
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    scale = float(np.mean(np.diag(cov)))
    reg = cov + ridge * scale * np.eye(cov.shape[0])
    if ridge == 0 or scale == 0:
        if np.linalg.matrix_rank(reg) < reg.shape[0]:
            raise NumericalError(
                f"{what} covariance is singular; use a positive ridge")
    try:
        inv = np.linalg.inv(reg)
    except np.linalg.LinAlgError:
        raise NumericalError(f"{what} covariance is singular; use a positive ridge") from None
    return MetricMatrix(0.5 * (inv + inv.T))


def confounder_metric(ds: Dataset, ridge: float = 1e-8) -> MetricMatrix:
    """Inverse sample covariance of the confounders over the full dataset.

    ``ridge`` is relative to the mean diagonal of the covariance:
    ``A = (Cov + ridge * mean(diag Cov) * I)^-1``.
    """
    return _inverse_covariance(ds.x, ridge, "confounder")


def treatment_metric(ds: Dataset, ridge: float = 1e-8) -> MetricMatrix:
    """Inverse sample covariance of the factual treatments."""
    return _inverse_covariance(ds.t1, ridge, "treatment")


def mahalanobis(x1, x2, m: MetricMatrix) -> float:
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.shape != (m.dim,) or x2.shape != (m.dim,):
        raise ValueError(f"expected vectors of length {m.dim}, got {x1.shape} and {x2.shape}")
    d = x1 - x2
    return float(np.sqrt(max(d @ m.a @ d, 0.0)))


def omega_from_sd_fraction(ds: Dataset, fraction: float) -> np.ndarray:
    """Treatment tolerances as a fraction of the counterfactual treatment sds."""
    if not fraction > 0:
        raise ValueError("fraction must be positive")
    sd = ds.t2.std(axis=0, ddof=1)
    if np.any(sd == 0):
        names = [ds.treatment_names[k] for k in np.flatnonzero(sd == 0)]
        raise ValueError(f"counterfactual treatment has zero variance: {names}")
    return fraction * sd


def _pair_from_linear(k: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    # row-major enumeration of (i, j), i < j
    k = np.asarray(k, dtype=np.int64)
    total = n * (n - 1) // 2
    i = n - 2 - np.floor(np.sqrt(-8.0 * k + 4.0 * n * (n - 1) - 7) / 2.0 - 0.5).astype(np.int64)
    j = k + i + 1 - total + (n - i) * (n - i - 1) // 2
    return i, j


def nu_from_percentile(ds: Dataset, m: MetricMatrix, pct: float = 10.0,
                       max_pairs: int = 2_000_000, seed: int = 0) -> float:
    """Percentile of the pairwise Mahalanobis confounder distances.

    Exact over all pairs when there are at most ``max_pairs`` of them,
    otherwise estimated from ``max_pairs`` distinct pairs drawn uniformly.
    """
    if not 0 < pct < 100:
        raise ValueError("pct must lie in (0, 100)")
    n = ds.n
    if n < 2:
        raise ValueError("need at least two units")
    z = m.whiten(ds.x)
    total = n * (n - 1) // 2
    if total <= max_pairs:
        d = pdist(z)
    else:
        rng = np.random.default_rng(seed)
        k = np.sort(rng.choice(total, size=max_pairs, replace=False))
        i, j = _pair_from_linear(k, n)
        diff = z[i] - z[j]
        d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    return float(np.percentile(d, pct))


def match_against_pool(q_t, q_z, pool_t, pool_z, omega, nu, backend=None):
    """CSR match sets of query rows against a pool of candidate rows.

    ``q_t``/``pool_t`` are treatments (counterfactual for queries, factual
    for the pool); ``q_z``/``pool_z`` are whitened confounders.
    """
    kern = _kernels.get(backend)
    pool_t = np.ascontiguousarray(pool_t, dtype=np.float64)
    order = np.argsort(pool_t[:, 0], kind="stable").astype(np.int64)
    key = np.ascontiguousarray(pool_t[order, 0])
    return kern.match_sorted(
        np.ascontiguousarray(q_t, dtype=np.float64), np.ascontiguousarray(q_z, dtype=np.float64),
        pool_t, np.ascontiguousarray(pool_z, dtype=np.float64), order, key,
        np.ascontiguousarray(omega, dtype=np.float64), float(nu) ** 2)


def find_matches(ds: Dataset, tol: Tolerances, m: MetricMatrix, backend=None) -> MatchAssignment:
    """Match every unit's counterfactual treatment against all factual ones."""
    if len(tol.omega) != ds.q_dim:
        raise ValueError(f"omega has {len(tol.omega)} entries, dataset has Q={ds.q_dim}")
    if m.dim != ds.p_dim:
        raise ValueError(f"metric is {m.dim}x{m.dim}, dataset has p={ds.p_dim}")
    z = m.whiten(ds.x)
    indptr, indices = match_against_pool(ds.t2, z, ds.t1, z, tol.omega, tol.nu, backend)
    return MatchAssignment(indptr, indices, tol)


def _row_means(indptr: np.ndarray, values: np.ndarray, rows: np.ndarray) -> np.ndarray:
    counts = np.diff(indptr)
    owner = np.repeat(np.arange(len(counts)), counts)
    sums = np.bincount(owner, weights=values, minlength=len(counts))
    return sums[rows] / counts[rows]


def estimate_tea_match1(ds: Dataset, ma: MatchAssignment) -> TeaResult:
    """Plain matching estimator: ``E_i = pop_i * mean(rate_k, k in phi(i))``."""
    ret = ma.retained
    mean_rate = _row_means(ma.indptr, ds.rates[ma.indices], ret)
    e_hat = ds.pop[ret] * mean_rate
    tau = float(np.sum(e_hat - ds.y[ret]))
    return TeaResult("match1", tau, ret, e_hat, ds.n)


def bias_corrected_e_hat(t2, x_query, pop_query, x_pool, indptr, indices, rates_pool,
                         mu_hat: CountPredictor, chunk: int = 250_000) -> np.ndarray:
    """Per-query bias-corrected expected counterfactual counts.

    Queries without matches get NaN. Both regression terms are expected
    counts at the query unit's population.
    """
    counts = np.diff(indptr)
    nq = len(counts)
    owner = np.repeat(np.arange(nq), counts)
    own = mu_hat.predict_counts(t2, x_query, pop_query)
    cross_sum = np.zeros(nq)
    for a in range(0, len(indices), chunk):
        rows = owner[a:a + chunk]
        cols = indices[a:a + chunk]
        vals = mu_hat.predict_counts(t2[rows], x_pool[cols], pop_query[rows])
        cross_sum += np.bincount(rows, weights=vals, minlength=nq)
    rate_sum = np.bincount(owner, weights=rates_pool[indices], minlength=nq)
    with np.errstate(invalid="ignore", divide="ignore"):
        return (rate_sum * pop_query + counts * own - cross_sum) / counts


def estimate_tea_match_bc(ds: Dataset, ma: MatchAssignment, mu_hat: CountPredictor,
                          method: str = "match_bc") -> TeaResult:
    """Matching estimator with a regression bias correction.

    ``E_i = mean_k (rate_k * pop_i + mu(t2_i, x_i) - mu(t2_i, x_k))``.
    """
    ret = ma.retained
    e_all = bias_corrected_e_hat(ds.t2, ds.x, ds.pop.astype(np.float64), ds.x,
                                 ma.indptr, ma.indices, ds.rates, mu_hat)
    e_hat = e_all[ret]
    tau = float(np.sum(e_hat - ds.y[ret]))
    return TeaResult(method, tau, ret, e_hat, ds.n)


def true_tea_trimmed(sim, retained: Sequence[int] | np.ndarray) -> float:
    """Sum of ``lambda_cf - lambda`` over ``retained`` for simulated data."""
    retained = np.asarray(retained, dtype=np.intp)
    return float(np.sum(sim.lam_cf[retained] - sim.lam[retained]))
