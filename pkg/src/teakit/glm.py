"""Poisson regression fitted by iteratively reweighted least squares.

Used both as the bias-correction regression of the matching estimators and
as the standalone Poisson-regression TEA estimator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .data import Dataset, NumericalError
from .matching import TeaResult

# ---------------------------------------------------------------- design terms


@dataclass(frozen=True)
class Col:
    """Raw column ``k`` of the treatments (``src="t"``) or confounders (``"x"``)."""

    src: str
    k: int

    def __call__(self, t, x):
        return (t if self.src == "t" else x)[:, self.k]

    @property
    def name(self) -> str:
        return f"{self.src}{self.k + 1}"


@dataclass(frozen=True)
class Prod:
    factors: tuple

    def __call__(self, t, x):
        out = self.factors[0](t, x)
        for f in self.factors[1:]:
            out = out * f(t, x)
        return out

    @property
    def name(self) -> str:
        return "*".join(f.name for f in self.factors)


@dataclass(frozen=True)
class Square:
    inner: Col

    def __call__(self, t, x):
        v = self.inner(t, x)
        return v * v

    @property
    def name(self) -> str:
        return f"{self.inner.name}^2"


@dataclass(frozen=True)
class Logistic:
    inner: Col

    def __call__(self, t, x):
        v = self.inner(t, x)
        return np.exp(v) / (1.0 + np.exp(v))

    @property
    def name(self) -> str:
        return f"logistic({self.inner.name})"


def linear_design(q_dim: int, p_dim: int) -> tuple:
    """Every treatment and confounder as a linear term."""
    return tuple(Col("t", k) for k in range(q_dim)) + tuple(Col("x", k) for k in range(p_dim))


def design_matrix(design: Sequence, t: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Intercept column followed by one column per design term."""
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    out = np.empty((t.shape[0], len(design) + 1))
    out[:, 0] = 1.0
    for k, term in enumerate(design):
        out[:, k + 1] = term(t, x)
    return out


def term_names(design: Sequence) -> list[str]:
    return ["(intercept)"] + [term.name for term in design]


# ---------------------------------------------------------------- fitting


@dataclass(frozen=True, eq=False)
class GlmFit:
    beta: np.ndarray
    cov_beta: np.ndarray
    design: tuple
    use_offset: bool
    converged: bool
    iterations: int
    deviance_path: tuple[float, ...] = field(default=())
    score_max: float = float("nan")

    @property
    def deviance(self) -> float:
        return self.deviance_path[-1]

    def linear_predictor(self, t, x) -> np.ndarray:
        return design_matrix(self.design, t, x) @ self.beta

    def predict_counts(self, t, x, pop) -> np.ndarray:
        """Expected counts; ``pop`` scales the prediction only for offset fits."""
        mu = np.exp(self.linear_predictor(t, x))
        if self.use_offset:
            mu = mu * np.asarray(pop, dtype=np.float64)
        return mu

    def with_beta(self, beta: np.ndarray) -> "GlmFit":
        return GlmFit(np.asarray(beta, dtype=np.float64), self.cov_beta, self.design,
                      self.use_offset, self.converged, self.iterations,
                      self.deviance_path, self.score_max)


def poisson_deviance(y: np.ndarray, mu: np.ndarray) -> float:
    with np.errstate(divide="ignore", invalid="ignore"):
        ylogy = np.where(y > 0, y * np.log(y / mu), 0.0)
    return float(2.0 * np.sum(ylogy - (y - mu)))


def _check_rank(xmat: np.ndarray, names: list[str]) -> None:
    norms = np.linalg.norm(xmat, axis=0)
    if np.any(norms == 0):
        raise NumericalError(f"design column {names[int(np.argmin(norms))]!r} is identically zero")
    scaled = xmat / norms
    if np.linalg.matrix_rank(scaled) == xmat.shape[1]:
        return
    for k in range(1, xmat.shape[1] + 1):
        if np.linalg.matrix_rank(scaled[:, :k]) < k:
            raise NumericalError(f"design is rank deficient: column {names[k - 1]!r} is collinear "
                                 "with earlier columns")


def _wls(xmat, w, z, col_scale):
    # weighted least squares via scaled normal equations; lstsq if ill-conditioned
    xs = xmat * col_scale
    xw = xs * w[:, None]
    gram = xs.T @ xw
    try:
        c = cho_factor(gram)
        coef = cho_solve(c, xw.T @ z)
        if np.all(np.isfinite(coef)) and np.linalg.cond(gram) < 1e12:
            return coef * col_scale
    except np.linalg.LinAlgError:
        pass
    sw = np.sqrt(w)
    return np.linalg.lstsq(xmat * sw[:, None], z * sw, rcond=None)[0]


def fit_poisson_arrays(xmat: np.ndarray, y: np.ndarray, offset: np.ndarray | None,
                       max_iter: int = 100, tol_score: float = 1e-8,
                       tol_dev: float = 1e-10, names: list[str] | None = None):
    """IRLS on a prepared design matrix.

    Returns ``(beta, cov_beta, iterations, deviance_path, score_max)``.
    Each accepted step does not increase the deviance; a step that would is
    halved until it does not.
    """
    y = np.asarray(y, dtype=np.float64)
    n, k = xmat.shape
    if names is None:
        names = [f"c{j}" for j in range(k)]
    _check_rank(xmat, names)
    off = np.zeros(n) if offset is None else offset
    col_scale = 1.0 / np.linalg.norm(xmat, axis=0)
    mean_rate = float(np.sum(y) / np.sum(np.exp(off)))
    if mean_rate <= 0:
        raise NumericalError("all counts are zero; Poisson MLE does not exist")
    beta = np.zeros(k)
    beta[0] = math.log(mean_rate)
    eta = xmat @ beta + off
    mu = np.exp(eta)
    dev = poisson_deviance(y, mu)
    path = [dev]
    for it in range(1, max_iter + 1):
        w = mu
        z = eta - off + (y - mu) / mu
        beta_new = _wls(xmat, w, z, col_scale)
        step = beta_new - beta
        for _ in range(60):
            cand = beta + step
            eta_c = xmat @ cand + off
            with np.errstate(over="ignore"):
                mu_c = np.exp(eta_c)
            dev_c = poisson_deviance(y, mu_c) if np.all(np.isfinite(mu_c)) else np.inf
            if dev_c <= dev:
                break
            step = step / 2.0
        else:
            raise NumericalError(f"IRLS could not decrease the deviance; path={path}")
        beta, eta, mu = cand, eta_c, mu_c
        rel = abs(dev - dev_c) / (abs(dev_c) + 0.1)
        dev = dev_c
        path.append(dev)
        score = xmat.T @ (y - mu)
        score_max = float(np.max(np.abs(score)))
        if score_max < tol_score or rel < tol_dev:
            info = xmat.T @ (xmat * mu[:, None])
            cov = np.linalg.inv(info)
            return beta, 0.5 * (cov + cov.T), it, tuple(path), score_max
    raise NumericalError(f"IRLS did not converge in {max_iter} iterations; deviance path={path}")


def fit_poisson(ds: Dataset, design: Sequence | None = None, use_offset: bool = True,
                max_iter: int = 100) -> GlmFit:
    """Poisson regression of counts on ``design`` evaluated at the factual treatments.

    With ``use_offset`` the log population enters as an offset, so the
    coefficients describe rates.
    """
    design = tuple(design) if design is not None else linear_design(ds.q_dim, ds.p_dim)
    xmat = design_matrix(design, ds.t1, ds.x)
    offset = np.log(ds.pop.astype(np.float64)) if use_offset else None
    beta, cov, it, path, score = fit_poisson_arrays(
        xmat, ds.y, offset, max_iter=max_iter, names=term_names(design))
    return GlmFit(beta, cov, design, use_offset, True, it, path, score)


def predict_count(fit: GlmFit, t, x, pop) -> float:
    """Expected count at a single ``(t, x)`` for a unit of population ``pop``."""
    return float(fit.predict_counts(np.atleast_2d(t), np.atleast_2d(x), np.atleast_1d(pop))[0])


PR_INTERVAL_METHOD = "coefficient-normal resampling (implementation convention)"


def estimate_tea_poisson(ds: Dataset, fit: GlmFit, retained, draws: int = 1000,
                         seed: int = 0, method: str = "pr") -> TeaResult:
    """Poisson-regression TEA over ``retained`` with a resampled-coefficient interval."""
    if draws < 100:
        raise ValueError("draws must be at least 100")
    retained = np.asarray(retained, dtype=np.intp)
    xcf = design_matrix(fit.design, ds.t2[retained], ds.x[retained])
    log_pop = np.log(ds.pop[retained].astype(np.float64)) if fit.use_offset else 0.0
    y = ds.y[retained]
    e_hat = np.exp(xcf @ fit.beta + log_pop)
    tau = float(np.sum(e_hat - y))
    rng = np.random.default_rng(seed)
    betas = rng.multivariate_normal(fit.beta, fit.cov_beta, size=draws, method="eigh")
    taus = np.exp(xcf @ betas.T + np.reshape(log_pop, (-1, 1))).sum(axis=0) - y.sum()
    lo, hi = np.percentile(taus, [2.5, 97.5])
    res = TeaResult(method, tau, retained, e_hat, ds.n)
    return res.with_interval(lo, hi, PR_INTERVAL_METHOD, taus)
