import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial.distance import pdist

from teakit import _kernels
from teakit.data import NumericalError, from_arrays
from teakit.matching import (MatchAssignment, MetricMatrix, Tolerances, _pair_from_linear,
                             confounder_metric, estimate_tea_match1, estimate_tea_match_bc,
                             find_matches, mahalanobis, nu_from_percentile,
                             omega_from_sd_fraction, true_tea_trimmed)
from teakit.simulate import generate_scenario, scenario

from conftest import random_dataset

BACKENDS = ["python"] + (["cython"] if _kernels.compiled is not None else [])


def brute_force_phi(ds, tol, a):
    """Exhaustive double loop with the quadratic form evaluated directly."""
    phi = {}
    for i in range(ds.n):
        phi[i] = []
        for j in range(ds.n):
            box = all(abs(ds.t2[i, q] - ds.t1[j, q]) < tol.omega[q] for q in range(ds.q_dim))
            d = ds.x[i] - ds.x[j]
            if box and math.sqrt(max(float(d @ a @ d), 0.0)) < tol.nu:
                phi[i].append(j)
    return phi


def hand_match1(ds, phi):
    total = 0.0
    for i, js in phi.items():
        if js:
            e = ds.pop[i] * sum(ds.y[k] / ds.pop[k] for k in js) / len(js)
            total += e - ds.y[i]
    return total


# ---------------------------------------------------------------- metric


def test_metric_identity_covariance():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(200, 3))
    z = (z - z.mean(0)) @ np.linalg.inv(np.linalg.cholesky(np.cov(z, rowvar=False))).T
    ds = from_arrays(np.zeros((200, 1)), np.zeros((200, 1)), z, np.zeros(200))
    np.testing.assert_allclose(confounder_metric(ds, ridge=0).a, np.eye(3), atol=1e-10)


def test_metric_diagonal_inverse():
    x = np.array([[2.0, 3.0], [-2.0, -3.0], [2.0, -3.0], [-2.0, 3.0]])
    # sample variances 16/3 and 12 with ddof=1; rescale to 4 and 9
    x = x * np.sqrt([4 / (16 / 3), 9 / 12])
    ds = from_arrays(np.zeros((4, 1)), np.zeros((4, 1)), x, np.zeros(4))
    np.testing.assert_allclose(confounder_metric(ds, ridge=0).a, np.diag([1 / 4, 1 / 9]),
                               atol=1e-12)


def test_metric_collinear_ridge_matches_eigen_oracle():
    rng = np.random.default_rng(1)
    c = rng.normal(size=50)
    x = np.column_stack([c, c])
    ds = from_arrays(np.zeros((50, 1)), np.zeros((50, 1)), x, np.zeros(50))
    m = confounder_metric(ds, ridge=1e-8)
    cov = np.cov(x, rowvar=False)
    lam, vec = np.linalg.eigh(cov + 1e-8 * np.mean(np.diag(cov)) * np.eye(2))
    oracle = vec @ np.diag(1 / lam) @ vec.T
    assert np.all(np.isfinite(m.a))
    np.testing.assert_allclose(m.a, oracle, rtol=1e-6)
    assert np.linalg.eigvalsh(m.a).max() == pytest.approx(1 / (1e-8 * np.var(c, ddof=1)), rel=1e-6)
    with pytest.raises(NumericalError, match="ridge"):
        confounder_metric(ds, ridge=0)


def test_mahalanobis_examples():
    eye = MetricMatrix(np.eye(2))
    assert mahalanobis([1.0, 2.0], [1.0, 2.0], eye) == 0.0
    assert mahalanobis([3.0, 4.0], [0.0, 0.0], eye) == 5.0
    d = MetricMatrix(np.diag([1 / 4, 1 / 9]))
    assert mahalanobis([2.0, 3.0], [0.0, 0.0], d) == pytest.approx(math.sqrt(2), rel=1e-15)
    with pytest.raises(ValueError):
        mahalanobis([1.0], [1.0, 2.0], eye)


def test_metric_rejects_asymmetric():
    with pytest.raises(ValueError):
        MetricMatrix(np.array([[1.0, 0.5], [0.0, 1.0]]))


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3),
       st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_mahalanobis_symmetric(a, b):
    m = MetricMatrix(np.array([[2.0, 0.3, 0.0], [0.3, 1.0, 0.1], [0.0, 0.1, 0.5]]))
    assert mahalanobis(a, b, m) == pytest.approx(mahalanobis(b, a, m), rel=1e-12, abs=1e-12)


# ---------------------------------------------------------------- tolerances


def test_omega_examples_s1():
    ds = generate_scenario(scenario("S1"), 7).dataset
    w10 = omega_from_sd_fraction(ds, 0.10)
    w25 = omega_from_sd_fraction(ds, 0.25)
    # published to the printed precision; the first component also within 10%
    assert abs(w10[0] - 0.35) <= 0.035 and round(w10[1], 3) == 0.001
    assert abs(w25[0] - 0.88) <= 0.088 and round(w25[1], 3) == 0.003
    np.testing.assert_allclose(w10, 0.1 * ds.t2.std(axis=0, ddof=1))


def test_omega_constant_column_errors():
    ds = from_arrays(np.zeros((3, 1)), np.ones((3, 1)), np.arange(3.0)[:, None], np.zeros(3))
    with pytest.raises(ValueError, match="zero variance"):
        omega_from_sd_fraction(ds, 0.1)


def test_tolerances_must_be_positive():
    with pytest.raises(ValueError):
        Tolerances([0.1, 0.0], 1.0)
    with pytest.raises(ValueError):
        Tolerances([0.1], -1.0)


def test_nu_median_of_three():
    # collinear points at 0, 1, 3 on one whitened axis -> distances 1, 2, 3
    x = np.array([[0.0], [1.0], [3.0]])
    ds = from_arrays(np.zeros((3, 1)), np.zeros((3, 1)), x, np.zeros(3))
    assert nu_from_percentile(ds, MetricMatrix(np.eye(1)), 50) == 2.0


def test_nu_exact_matches_pdist_oracle():
    rng = np.random.default_rng(3)
    ds = random_dataset(rng, n=60, p=4)
    m = confounder_metric(ds)
    d = [mahalanobis(ds.x[i], ds.x[j], m) for i in range(60) for j in range(i + 1, 60)]
    assert nu_from_percentile(ds, m, 10) == pytest.approx(np.percentile(d, 10), rel=1e-12)


def test_pair_from_linear_enumerates_upper_triangle():
    n = 9
    i, j = _pair_from_linear(np.arange(n * (n - 1) // 2), n)
    expected = [(a, b) for a in range(n) for b in range(a + 1, n)]
    assert list(zip(i.tolist(), j.tolist())) == expected


def test_nu_subsampled_agrees_with_exact():
    ds = generate_scenario(scenario("S1"), 11).dataset
    m = confounder_metric(ds)
    exact = np.percentile(pdist(m.whiten(ds.x)), 10)
    a = nu_from_percentile(ds, m, 10, max_pairs=1_000_000, seed=1)
    b = nu_from_percentile(ds, m, 10, max_pairs=1_000_000, seed=2)
    assert abs(a - b) / exact < 0.02
    assert abs(a - exact) / exact < 0.02


@pytest.mark.xfail(strict=True, reason="the 10th percentile under the published design is "
                   "about 1.80; the quoted 1.94 sits near the 13.5th (see decisions ledger)")
def test_nu_published_value():
    vals = []
    for seed in range(3):
        ds = generate_scenario(scenario("S1"), seed).dataset
        vals.append(nu_from_percentile(ds, confounder_metric(ds), 10, max_pairs=500_000))
    assert abs(np.mean(vals) - 1.94) <= 0.1


# ---------------------------------------------------------------- matching


@pytest.mark.parametrize("backend", BACKENDS)
def test_find_matches_crafted_20(backend):
    rng = np.random.default_rng(20)
    t1 = np.round(rng.uniform(0, 2, size=(20, 2)), 1)
    t2 = t1 + np.round(rng.uniform(0, 0.5, size=(20, 2)), 1)
    t1[3] = t2[7]                      # exact coincidence
    x = rng.normal(size=(20, 3))
    x[3] = x[7]
    ds = from_arrays(t1, t2, x, rng.integers(0, 9, 20), rng.integers(1, 20, 20))
    m = confounder_metric(ds)
    tol = Tolerances([0.3, 0.3], 2.0)
    ma = find_matches(ds, tol, m, backend)
    assert ma.phi == brute_force_phi(ds, tol, m.a)
    assert 3 in ma.matches(7)


@pytest.mark.parametrize("backend", BACKENDS)
def test_saturated_tolerances_match_everything(backend):
    ds = random_dataset(np.random.default_rng(5), n=25)
    ma = find_matches(ds, Tolerances([1e9, 1e9], 1e9), confounder_metric(ds), backend)
    assert all(ma.matches(i).tolist() == list(range(25)) for i in range(25))
    assert ma.s == 25


def test_strict_inequality_on_boundary():
    # j sits exactly omega away from i's counterfactual: not a match
    t1 = np.array([[0.0], [1.5]])
    t2 = np.array([[1.0], [1.5]])
    x = np.array([[0.0], [0.0]])
    ds = from_arrays(t1, t2, x, [1, 1])
    ma = find_matches(ds, Tolerances([0.5], 1.0), MetricMatrix(np.eye(1)))
    assert ma.matches(0).tolist() == []
    ma = find_matches(ds, Tolerances([0.5000001], 1.0), MetricMatrix(np.eye(1)))
    assert ma.matches(0).tolist() == [1]


def test_self_match_allowed():
    ds = from_arrays([[1.0]], [[1.0]], [[0.0]], [2])
    ma = find_matches(ds, Tolerances([0.1], 0.1), MetricMatrix(np.eye(1)))
    assert ma.matches(0).tolist() == [0]


@pytest.mark.parametrize("backend", BACKENDS)
@given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(2, 50),
       w=st.floats(0.05, 2.0), nu=st.floats(0.1, 4.0))
def test_find_matches_equals_oracle(backend, seed, n, w, nu):
    ds = random_dataset(np.random.default_rng(seed), n=n)
    m = confounder_metric(ds)
    tol = Tolerances([w, w], nu)
    ma = find_matches(ds, tol, m, backend)
    assert ma.phi == brute_force_phi(ds, tol, m.a)
    assert ma.retained.tolist() == [i for i in range(n) if ma.m[i] > 0]
    if ma.s:
        assert estimate_tea_match1(ds, ma).tau_star == pytest.approx(
            hand_match1(ds, ma.phi), rel=1e-9, abs=1e-9)


@given(seed=st.integers(0, 2 ** 32 - 1), w=st.floats(0.05, 1.0), nu=st.floats(0.2, 3.0),
       grow=st.floats(1.0, 3.0))
def test_monotone_in_tolerances(seed, w, nu, grow):
    ds = random_dataset(np.random.default_rng(seed), n=40)
    m = confounder_metric(ds)
    small = find_matches(ds, Tolerances([w, w], nu), m)
    for tol in (Tolerances([w * grow, w], nu), Tolerances([w, w], nu * grow)):
        big = find_matches(ds, tol, m)
        for i in range(ds.n):
            assert set(small.matches(i)) <= set(big.matches(i))
        assert set(small.retained) <= set(big.retained)


# ---------------------------------------------------------------- estimators


def _assignment(phi, n, tol=Tolerances([1.0], 1.0)):
    indptr = np.zeros(n + 1, dtype=np.int64)
    for i in range(n):
        indptr[i + 1] = indptr[i] + len(phi.get(i, []))
    indices = np.array([j for i in range(n) for j in phi.get(i, [])], dtype=np.int64)
    return MatchAssignment(indptr, indices, tol)


def test_match1_one_term_average():
    ds = from_arrays([[0.0], [0.0]], [[0.0], [0.0]], [[0.0], [0.0]], [40, 5], [1000, 100])
    ma = _assignment({0: [1]}, 2)
    r = estimate_tea_match1(ds, ma)
    assert r.per_unit_e_hat.tolist() == [50.0]
    assert r.tau_star == 10.0


def test_match1_symmetric_average():
    ds = from_arrays(np.zeros((3, 1)), np.zeros((3, 1)), np.zeros((3, 1)), [5, 4, 6],
                     [100, 100, 100])
    r = estimate_tea_match1(ds, _assignment({0: [1, 2]}, 3))
    assert r.per_unit_e_hat[0] == pytest.approx(5.0, rel=1e-15)
    assert r.tau_star == pytest.approx(0.0, abs=1e-12)
    assert r.s == 1 and r.n == 3


def test_identical_match_rates_give_exact_expectation():
    ds = from_arrays(np.zeros((4, 1)), np.zeros((4, 1)), np.zeros((4, 1)), [3, 6, 9, 1],
                     [7, 10, 15, 5])
    r = estimate_tea_match1(ds, _assignment({0: [1, 1], 3: [1]}, 4))
    np.testing.assert_array_equal(r.per_unit_e_hat, [7 * 0.6, 5 * 0.6])


class _ConstantMu:
    def predict_counts(self, t, x, pop):
        return 3.0 * np.asarray(pop, dtype=float)


class _LinearRate:
    def __init__(self, b):
        self.b = b

    def predict_counts(self, t, x, pop):
        return np.exp(0.1 * t[:, 0] + x @ self.b) * pop


@given(seed=st.integers(0, 2 ** 32 - 1))
def test_bias_correction_constant_mu_reduces_to_match1(seed):
    ds = random_dataset(np.random.default_rng(seed), n=40)
    ma = find_matches(ds, Tolerances([1.0, 1.0], 2.5), confounder_metric(ds))
    if ma.s == 0:
        return
    a = estimate_tea_match1(ds, ma).tau_star
    b = estimate_tea_match_bc(ds, ma, _ConstantMu()).tau_star
    assert b == pytest.approx(a, rel=1e-9, abs=1e-9)


def test_bias_correction_matches_formula_oracle():
    ds = random_dataset(np.random.default_rng(8), n=30)
    ma = find_matches(ds, Tolerances([1.0, 1.0], 2.5), confounder_metric(ds))
    mu = _LinearRate(np.array([0.2, -0.1, 0.05]))
    r = estimate_tea_match_bc(ds, ma, mu)
    total = 0.0
    for i in ma.retained:
        js = ma.matches(i)
        own = math.exp(0.1 * ds.t2[i, 0] + ds.x[i] @ mu.b) * ds.pop[i]
        terms = [ds.y[k] / ds.pop[k] * ds.pop[i] + own
                 - math.exp(0.1 * ds.t2[i, 0] + ds.x[k] @ mu.b) * ds.pop[i] for k in js]
        total += sum(terms) / len(terms) - ds.y[i]
    assert r.tau_star == pytest.approx(total, rel=1e-10)


def test_permutation_invariance():
    rng = np.random.default_rng(9)
    ds = random_dataset(rng, n=45)
    perm = rng.permutation(ds.n)
    dp = ds.take(perm)
    tol = Tolerances([0.8, 0.8], 2.0)
    a = estimate_tea_match1(ds, find_matches(ds, tol, confounder_metric(ds)))
    b = estimate_tea_match1(dp, find_matches(dp, tol, confounder_metric(dp)))
    assert b.tau_star == pytest.approx(a.tau_star, rel=1e-9)
    mu = _LinearRate(np.array([0.1, 0.0, -0.2]))
    a = estimate_tea_match_bc(ds, find_matches(ds, tol, confounder_metric(ds)), mu)
    b = estimate_tea_match_bc(dp, find_matches(dp, tol, confounder_metric(dp)), mu)
    assert b.tau_star == pytest.approx(a.tau_star, rel=1e-9)


def test_true_tea_trimmed_examples():
    sim = generate_scenario(scenario("S3", n=300), 4)
    assert true_tea_trimmed(sim, []) == 0.0
    assert true_tea_trimmed(sim, np.arange(300)) == pytest.approx(sim.true_tau, rel=1e-12)


def test_tau_star_is_sum_of_unit_terms():
    ds = random_dataset(np.random.default_rng(10), n=40)
    ma = find_matches(ds, Tolerances([1.0, 1.0], 2.5), confounder_metric(ds))
    r = estimate_tea_match1(ds, ma)
    assert r.tau_star == pytest.approx(float(np.sum(r.per_unit_e_hat - ds.y[r.retained])))
    assert r.interval is None
