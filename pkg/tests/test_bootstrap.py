import itertools
import math

import numpy as np
import pytest
from scipy.spatial.distance import mahalanobis as sp_mahalanobis

from teakit import _kernels
from teakit.bootstrap import (BootstrapConfig, bootstrap_replicates, bootstrap_replicates_grid,
                              bootstrap_tea, percentile_interval, replicate_matches)
from teakit.data import from_arrays
from teakit.matching import (Tolerances, confounder_metric, estimate_tea_match1, find_matches,
                             treatment_metric)

from conftest import random_dataset


def _oracle_tau(ds, b1, b2, tol, am, at, c):
    """Replicate total by brute force over pool positions."""
    total = 0.0
    for i in b1:
        cand = [j for j in b2
                if np.all(np.abs(ds.t2[i] - ds.t1[j]) < tol.omega)
                and sp_mahalanobis(ds.x[i], ds.x[j], am.a) < tol.nu]
        if not cand:
            dt = [sp_mahalanobis(ds.t2[i], ds.t1[j], at.a) for j in b2]
            near = sorted(range(len(b2)), key=lambda p: (dt[p], p))[:c]
            dz = [sp_mahalanobis(ds.x[i], ds.x[b2[p]], am.a) for p in near]
            cand = [b2[near[int(np.argmin(dz))]]]
        total += ds.pop[i] * np.mean([ds.rates[j] for j in cand]) - ds.y[i]
    return total


def _twin_dataset(rng, n=30):
    # unit i's counterfactual equals unit (i+1) mod n's factual treatment exactly
    t1 = np.cumsum(rng.uniform(1, 2, size=(n + 1, 2)), axis=0)
    x = rng.normal(size=(n + 1, 3))
    pop = rng.integers(5, 20, size=n + 1)
    return from_arrays(t1, np.roll(t1, -1, axis=0), x, rng.poisson(pop * 0.2), pop)


def test_config_validation():
    tol = Tolerances(np.array([1.0]), 1.0)
    with pytest.raises(ValueError):
        BootstrapConfig(tol, b_reps=1)
    with pytest.raises(ValueError):
        BootstrapConfig(tol, c_fallback=0)


def test_twin_dataset_matches_via_twin():
    rng = np.random.default_rng(1)
    ds = _twin_dataset(rng)
    tol = Tolerances(np.array([0.5, 0.5]), 1e6)
    am, at = confounder_metric(ds), treatment_metric(ds)
    ma = find_matches(ds, tol, am)
    retained = ma.retained
    assert ma.s == ds.n
    cfg = BootstrapConfig(tol, b_reps=10, seed=3)
    reps, diag = bootstrap_replicates(ds, ma, cfg, return_diagnostics=True)
    assert np.all(np.isfinite(reps))
    assert np.all(diag["min_matches"] >= 1)
    z, tw = am.whiten(ds.x), at.chol
    for b in range(10):
        b2 = np.random.default_rng(np.random.SeedSequence([3, b, 0])).integers(0, ds.n, ds.n)
        rng1 = np.random.default_rng(np.random.SeedSequence([3, b, 1]))
        b1 = retained[rng1.integers(0, len(retained), len(retained))]
        indptr, units, _ = replicate_matches(ds, b1, b2, tol, z, tw, 5)
        for k, i in enumerate(b1):
            got = units[indptr[k]:indptr[k + 1]]
            twin = (i + 1) % ds.n
            if twin in b2:
                assert set(got) == {twin}
                assert len(got) == np.count_nonzero(b2 == twin)


def test_two_unit_exhaustive_enumeration():
    ds = from_arrays([[0.0], [1.0]], [[0.5], [3.0]], [[0.0], [1.0]], [3, 7], [10, 20])
    am, at = confounder_metric(ds), treatment_metric(ds)
    tol = Tolerances(np.array([0.6]), 10.0)
    ma = find_matches(ds, tol, am)
    assert ma.s == 1 and list(ma.retained) == [0]
    # enumerate retained draws of every size-2 pair (as if S = N = 2)
    items = [(np.array([0, 1]), tol)]
    support = {}
    for b1 in itertools.product([0, 1], repeat=2):
        for b2 in itertools.product([0, 1], repeat=2):
            v = round(_oracle_tau(ds, b1, b2, tol, am, at, 1), 9)
            support[v] = support.get(v, 0) + 1 / 16
    cfg = BootstrapConfig(tol, b_reps=2000, c_fallback=1, seed=0)
    reps, diag = bootstrap_replicates_grid(ds, items, cfg, metric=am, t_metric=at)
    reps = reps[0, 0]
    assert np.all(diag["min_matches"] >= 1)
    vals, counts = np.unique(np.round(reps, 9), return_counts=True)
    assert set(vals) == set(support)
    for v, cnt in zip(vals, counts):
        p = support[v]
        assert abs(cnt / 2000 - p) < 4 * math.sqrt(p * (1 - p) / 2000)
    # every atom carries at least 1/16 > 2.5% mass, so the interval spans the support
    lo, hi = percentile_interval(reps)
    assert math.isclose(lo, min(support), abs_tol=1e-8) and math.isclose(hi, max(support), abs_tol=1e-8)


def test_replicates_match_brute_force_oracle(rng):
    ds = random_dataset(rng, n=35)
    am, at = confounder_metric(ds), treatment_metric(ds)
    tol = Tolerances(np.array([0.4, 0.4]), 1.2)
    ma = find_matches(ds, tol, am)
    assert 0 < ma.s < ds.n
    cfg = BootstrapConfig(tol, b_reps=15, c_fallback=3, seed=11)
    reps = bootstrap_replicates(ds, ma, cfg, metric=am, t_metric=at)[0]
    for b in range(15):
        b2 = np.random.default_rng(np.random.SeedSequence([11, b, 0])).integers(0, ds.n, ds.n)
        rng1 = np.random.default_rng(np.random.SeedSequence([11, b, 1]))
        b1 = ma.retained[rng1.integers(0, ma.s, ma.s)]
        assert math.isclose(reps[b], _oracle_tau(ds, b1, b2, tol, am, at, 3),
                            rel_tol=1e-9, abs_tol=1e-9)


def test_fallback_kernel_oracle(rng):
    kern = _kernels.active
    pool_tw, pool_z = rng.normal(size=(40, 2)), rng.normal(size=(40, 3))
    q_tw, q_z = rng.normal(size=(25, 2)), rng.normal(size=(25, 3))
    for c in (1, 3, 40, 100):
        got = kern.nearest_fallback(q_tw, q_z, pool_tw, pool_z, c)
        for i in range(25):
            dt = np.sum((pool_tw - q_tw[i]) ** 2, axis=1)
            near = np.argsort(dt, kind="stable")[:c]
            dz = np.sum((pool_z[near] - q_z[i]) ** 2, axis=1)
            assert got[i] == near[np.argmin(dz)]


def test_multiplicity_counts():
    ds = from_arrays([[0.0], [5.0], [9.0]], [[0.1], [5.1], [9.1]], [[0.0], [1.0], [2.0]],
                     [1, 2, 3], [10, 10, 10])
    am, at = confounder_metric(ds), treatment_metric(ds)
    tol = Tolerances(np.array([0.5]), 1e6)
    b1 = np.array([0, 1])
    b2 = np.array([0, 0, 0, 1])
    indptr, units, n_fb = replicate_matches(ds, b1, b2, tol, am.whiten(ds.x), at.chol, 5)
    assert n_fb == 0
    assert sorted(units[indptr[0]:indptr[1]]) == [0, 0, 0]
    assert list(units[indptr[1]:indptr[2]]) == [1]
    # unit 2's counterfactual is absent from the pool: fallback picks the nearest
    indptr, units, n_fb = replicate_matches(ds, np.array([2, 0]), b2, tol, am.whiten(ds.x),
                                            at.chol, 1)
    assert n_fb == 1
    assert list(units[indptr[0]:indptr[1]]) == [1]
    assert sorted(units[indptr[1]:indptr[2]]) == [0, 0, 0]


def test_adversarial_no_trim(rng):
    # isolated counterfactuals: nothing matches inside the replicates
    ds = random_dataset(rng, n=40, shift=6.0)
    am = confounder_metric(ds)
    tol = Tolerances(np.array([1.0, 1.0]), 0.8)
    ma = find_matches(ds, tol, am)
    assert ma.s > 0
    cfg = BootstrapConfig(tol, b_reps=50, c_fallback=2, seed=5)
    reps, diag = bootstrap_replicates(ds, ma, cfg, return_diagnostics=True)
    assert np.all(diag["min_matches"] >= 1) and diag["n_fallback"].sum() > 0
    assert np.all(np.isfinite(reps))


def test_determinism_and_interval(rng):
    ds = random_dataset(rng, n=60)
    tol = Tolerances(np.array([0.5, 0.5]), 1.5)
    ma = find_matches(ds, tol, confounder_metric(ds))
    cfg = BootstrapConfig(tol, b_reps=30, seed=2)
    a = bootstrap_tea(ds, ma, cfg)
    b = bootstrap_tea(ds, ma, cfg)
    assert a.interval == b.interval
    np.testing.assert_array_equal(a.replicates, b.replicates)
    assert a.tau_star == estimate_tea_match1(ds, ma).tau_star
    lo, hi = a.interval
    assert math.isfinite(lo) and math.isfinite(hi) and lo <= hi
    c = bootstrap_tea(ds, ma, BootstrapConfig(tol, b_reps=30, seed=3))
    assert c.interval != a.interval


def test_intercept_only_correction_equals_match1(rng):
    ds = random_dataset(rng, n=50)
    tol = Tolerances(np.array([0.5, 0.5]), 1.5)
    ma = find_matches(ds, tol, confounder_metric(ds))
    cfg = BootstrapConfig(tol, b_reps=12, seed=8)
    reps = bootstrap_replicates(ds, ma, cfg, designs=(None, ()))
    np.testing.assert_allclose(reps[1], reps[0], rtol=1e-10, atol=1e-9)


def test_grid_equals_single_items(rng):
    ds = random_dataset(rng, n=50)
    am = confounder_metric(ds)
    tols = [Tolerances(np.array([w, w]), 1.5) for w in (0.3, 0.6)]
    mas = [find_matches(ds, t, am) for t in tols]
    cfg = BootstrapConfig(tols[0], b_reps=8, seed=4)
    grid, _ = bootstrap_replicates_grid(ds, [(m.retained, t) for m, t in zip(mas, tols)], cfg)
    for k, (m, t) in enumerate(zip(mas, tols)):
        single = bootstrap_replicates(ds, m, BootstrapConfig(t, b_reps=8, seed=4))
        np.testing.assert_array_equal(grid[k], single)


def test_empty_retained_rejected(rng):
    ds = random_dataset(rng, n=20)
    tol = Tolerances(np.array([1e-9, 1e-9]), 1e-9)
    ma = find_matches(ds, tol, confounder_metric(ds))
    assert ma.s == 0
    with pytest.raises(ValueError):
        bootstrap_tea(ds, ma, BootstrapConfig(tol))
