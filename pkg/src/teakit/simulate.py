"""Synthetic datasets for the S-1 / S-2 / S-3 simulation designs.

Two pollutants: ``t1 ~ N(mu, diag(var))`` componentwise, counterfactual
``t2 = t1 + z`` with ``z_q ~ U(0, shift_q)``. Five confounders
``X_h = t1' alpha_h + eps_h`` and four outcome predictors that are never
observed by the estimators. Outcomes ``y ~ Poisson(lambda)`` with
``log lambda`` given by the scenario's term list; ``lambda_cf`` evaluates
the same expression at ``t2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, from_arrays
from .glm import Col, Logistic, Prod, Square

T1, T2 = Col("t", 0), Col("t", 1)
X1, X2, X3, X4, X5 = (Col("x", k) for k in range(5))

# observed terms of log(lambda), in coefficient order after the intercept;
# the four unobserved predictors always take the last four coefficients
_TERMS = {
    "S1": (X1, X2, X3, X4, X5, Prod((X1, X2)), Square(X3), Logistic(X4), T1, T2,
           Square(T1), Prod((T1, T2)), Prod((T1, T2, X5)), Prod((T1, T2, X4))),
    "S2": (X1, X2, X3, X4, X5, Prod((X1, X2)), Square(X3), Logistic(X4), T1, T2,
           Square(T1), Prod((T1, T2))),
    "S3": (X1, X2, X3, X4, X5, T1, T2),
}

_BETA = {
    "S1": (3.0, 0.001, -0.024, 0.050, -0.037, 0.024, 0.034, 0.023, -0.035, 0.008, 0.100,
           0.002, 0.030, 0.005, 0.030, 0.050, -0.020, 0.076, -0.03),
    "S2": (3.0, 0.001, -0.024, 0.050, -0.037, 0.024, 0.034, 0.023, -0.035, 0.008, 0.100,
           0.002, 0.030, 0.050, -0.020, 0.076, -0.03),
    "S3": (3.5, 0.001, -0.024, 0.050, -0.037, 0.024, 0.008, 0.100, 0.050, -0.020, 0.076,
           -0.03),
}

ALPHA = ((-0.18, 12.0), (0.10, -5.0), (0.04, -3.5), (0.17, 7.0), (0.04, -2.0))
EPS_VAR = (0.09, 1.04, 10.56, 4.12, 5.42)

# published true TEA (mean over the paper's replications), for reference output
PUBLISHED_TAU = {"S1": 60577.0, "S2": 49610.0, "S3": 5321.0}


@dataclass(frozen=True)
class SimScenario:
    label: str
    n: int = 5000
    beta: tuple[float, ...] | None = None
    alpha: tuple[tuple[float, float], ...] = ALPHA
    eps_var: tuple[float, ...] = EPS_VAR
    t_mean: tuple[float, float] = (12.18, 0.05)
    t_var: tuple[float, float] = (7.99, 0.0001)
    shift_max: tuple[float, float] = (7.08, 0.03)
    x4_tilde_var: float = 6.25

    def __post_init__(self):
        label = self.label.upper().replace("-", "")
        if label not in _TERMS:
            raise ValueError(f"unknown scenario {self.label!r}; expected S1, S2 or S3")
        object.__setattr__(self, "label", label)
        beta = _BETA[label] if self.beta is None else tuple(float(b) for b in self.beta)
        if len(beta) != len(_TERMS[label]) + 5:
            raise ValueError(f"{label} needs {len(_TERMS[label]) + 5} coefficients")
        object.__setattr__(self, "beta", beta)

    @property
    def terms(self) -> tuple:
        return _TERMS[self.label]

    def correct_design(self) -> tuple:
        """Regression design with the observed part of the outcome model."""
        return self.terms


def scenario(label: str, **overrides) -> SimScenario:
    return SimScenario(label, **overrides)


@dataclass(frozen=True, eq=False)
class SimDataset:
    dataset: Dataset
    lam: np.ndarray
    lam_cf: np.ndarray
    x_tilde: np.ndarray
    scenario: SimScenario
    seed: int

    @property
    def true_tau(self) -> float:
        return float(np.sum(self.lam_cf - self.lam))

    @property
    def unit_effects(self) -> np.ndarray:
        return self.lam_cf - self.lam


def eval_log_lambda(sc: SimScenario, t, x, x_tilde) -> np.ndarray:
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    x_tilde = np.atleast_2d(np.asarray(x_tilde, dtype=np.float64))
    beta = sc.beta
    out = np.full(t.shape[0], beta[0])
    for b, term in zip(beta[1:], sc.terms):
        out = out + b * term(t, x)
    return out + x_tilde @ np.asarray(beta[-4:])


def eval_lambda(sc: SimScenario, t, x, x_tilde) -> np.ndarray:
    """Expected count; the same routine serves factual and counterfactual."""
    return np.exp(eval_log_lambda(sc, t, x, x_tilde))


def generate_scenario(sc: SimScenario, seed: int) -> SimDataset:
    rng = np.random.default_rng(seed)
    n = sc.n
    t1 = np.column_stack([rng.normal(m, np.sqrt(v), n) for m, v in zip(sc.t_mean, sc.t_var)])
    z = np.column_stack([rng.uniform(0.0, hi, n) for hi in sc.shift_max])
    t2 = t1 + z
    alpha = np.asarray(sc.alpha)
    x = t1 @ alpha.T + rng.normal(size=(n, len(sc.eps_var))) * np.sqrt(sc.eps_var)
    x_tilde = np.column_stack([
        rng.normal(0.0, 1.0, n),
        rng.exponential(1.0, n),
        rng.uniform(0.0, 1.0, n),
        rng.normal(0.0, np.sqrt(sc.x4_tilde_var), n),
    ])
    lam = eval_lambda(sc, t1, x, x_tilde)
    lam_cf = eval_lambda(sc, t2, x, x_tilde)
    y = rng.poisson(lam)
    ds = from_arrays(t1, t2, x, y, np.ones(n, dtype=np.int64),
                     treatment_names=("pm25", "o3"),
                     confounder_names=tuple(f"x{k + 1}" for k in range(x.shape[1])))
    return SimDataset(ds, lam, lam_cf, x_tilde, sc, seed)
