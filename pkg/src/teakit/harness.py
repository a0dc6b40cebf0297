"""Monte Carlo driver for the simulation study.

One replication draws a dataset, builds match sets at each tolerance,
applies every requested estimator and records point estimates, intervals and
the true trimmed-sample TEA. ``summarize`` aggregates replications into
bias, coverage and trimming-geometry tables.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .bart import BartConfig, estimate_tea_bart, fit_bart
from .bootstrap import BootstrapConfig, bootstrap_replicates_grid, percentile_interval
from .glm import estimate_tea_poisson, fit_poisson, linear_design
from .matching import (Tolerances, confounder_metric, estimate_tea_match1,
                       estimate_tea_match_bc, find_matches, nu_from_percentile,
                       omega_from_sd_fraction, treatment_metric, true_tea_trimmed)
from .simulate import SimScenario, generate_scenario

log = logging.getLogger(__name__)

METHODS = ("match1", "match2", "match3", "bart", "pr1", "pr2")
LABELS = {"match1": "Match 1", "match2": "Match 2", "match3": "Match 3",
          "bart": "BART", "pr1": "PR 1", "pr2": "PR 2"}
# the correctly specified design is not examined for the all-linear scenario
NOT_APPLICABLE = {"S3": frozenset({"match3", "pr2"})}
OMEGA_FRACTIONS = (0.10, 0.15, 0.25)
FIXED_NU = 1.94


def parse_methods(spec: str | Iterable[str]) -> tuple[str, ...]:
    items = spec.split(",") if isinstance(spec, str) else list(spec)
    out = []
    for item in items:
        key = item.strip().lower().replace(" ", "").replace("_", "")
        if key == "all":
            return METHODS
        if key not in METHODS:
            raise ValueError(f"unknown method {item!r}; choose from {', '.join(METHODS)}")
        if key not in out:
            out.append(key)
    if not out:
        raise ValueError("no methods selected")
    return tuple(m for m in METHODS if m in out)


@dataclass(frozen=True)
class HarnessConfig:
    """Knobs shared by every replication of a study.

    ``nu_mode`` is ``"recompute"`` (percentile of this replication's pairwise
    distances) or ``"fixed"`` (``nu_value`` for every replication).
    """

    nu_mode: str = "recompute"
    nu_pct: float = 10.0
    nu_value: float = FIXED_NU
    b_reps: int = 100
    c_fallback: int = 5
    intervals: bool = True
    pr_draws: int = 1000
    bart: BartConfig = field(default_factory=BartConfig)
    bart_noise: bool = True
    n_units: int | None = None

    def __post_init__(self):
        if self.nu_mode not in ("recompute", "fixed"):
            raise ValueError("nu_mode must be 'recompute' or 'fixed'")


@dataclass(frozen=True)
class MethodOutcome:
    method: str
    point: float = math.nan
    lower: float = math.nan
    upper: float = math.nan
    status: str = "ok"     # ok | not-applicable

    @property
    def applicable(self) -> bool:
        return self.status == "ok"

    def covers(self, value: float) -> bool:
        return self.lower <= value <= self.upper


@dataclass(frozen=True)
class ReplicationResult:
    scenario: str
    omega_fraction: float
    rep: int
    seed: int
    nu: float = math.nan
    tau_star: float = math.nan
    tau: float = math.nan
    s: int = 0
    n: int = 0
    methods: dict = field(default_factory=dict)
    failure: str | None = None

    @property
    def ok(self) -> bool:
        return self.failure is None


def replication_seed(base_seed: int, rep: int) -> int:
    """Seed of replication ``rep``, independent of scheduling order."""
    return int(np.random.SeedSequence([base_seed, rep]).generate_state(1, np.uint64)[0])


def _stage_seeds(rep_seed: int) -> dict[str, int]:
    vals = np.random.SeedSequence(rep_seed).generate_state(4, np.uint64)
    return dict(zip(("data", "boot", "bart", "pr"), (int(v) for v in vals)))


def run_replication_grid(sc: SimScenario, omega_fractions: Sequence[float],
                         methods: Sequence[str], rep_seed: int,
                         config: HarnessConfig | None = None, rep: int = 0
                         ) -> list[ReplicationResult]:
    """All tolerances of one replication, sharing the dataset and fitted models."""
    cfg = config if config is not None else HarnessConfig()
    methods = parse_methods(methods)
    try:
        return _run_grid(sc, tuple(omega_fractions), methods, rep_seed, cfg, rep)
    except Exception as exc:  # labelled failure record, the study goes on
        log.warning("replication %d (seed %d) failed: %s", rep, rep_seed, exc)
        msg = f"{type(exc).__name__}: {exc}"
        return [ReplicationResult(sc.label, float(w), rep, rep_seed, failure=msg)
                for w in omega_fractions]


def run_replication(sc: SimScenario, omega_fraction: float, methods: Sequence[str],
                    rep_seed: int, config: HarnessConfig | None = None,
                    rep: int = 0) -> ReplicationResult:
    return run_replication_grid(sc, (omega_fraction,), methods, rep_seed, config, rep)[0]


def _run_grid(sc, omegas, methods, rep_seed, cfg, rep):
    seeds = _stage_seeds(rep_seed)
    if cfg.n_units is not None and cfg.n_units != sc.n:
        sc = replace(sc, n=cfg.n_units)
    sim = generate_scenario(sc, seeds["data"])
    ds = sim.dataset
    skip = NOT_APPLICABLE.get(sc.label, frozenset())
    active = [m for m in methods if m not in skip]

    metric = confounder_metric(ds)
    t_metric = treatment_metric(ds)
    if cfg.nu_mode == "fixed":
        nu = cfg.nu_value
    else:
        nu = nu_from_percentile(ds, metric, cfg.nu_pct, seed=seeds["data"] % (2 ** 32))

    lin = linear_design(ds.q_dim, ds.p_dim)
    correct = sc.correct_design()
    fits = {}
    if {"match2", "pr1"} & set(active):
        fits["lin"] = fit_poisson(ds, lin)
    if {"match3", "pr2"} & set(active):
        fits["correct"] = fit_poisson(ds, correct)
    bp = None
    if "bart" in active:
        bp = fit_bart(ds, cfg.bart, seed=seeds["bart"], keep_train_fit=False)

    assignments = []
    for w in omegas:
        tol = Tolerances(omega_from_sd_fraction(ds, w), nu)
        ma = find_matches(ds, tol, metric)
        if ma.s == 0:
            raise ValueError(f"every unit trimmed at omega fraction {w}")
        assignments.append(ma)

    match_methods = [m for m in ("match1", "match2", "match3") if m in active]
    boot = None
    if match_methods and cfg.intervals:
        designs = {"match1": None, "match2": lin, "match3": correct}
        bcfg = BootstrapConfig(assignments[0].tolerances, cfg.b_reps, cfg.c_fallback,
                               seed=seeds["boot"])
        boot, _ = bootstrap_replicates_grid(
            ds, [(ma.retained, ma.tolerances) for ma in assignments], bcfg,
            [designs[m] for m in match_methods], metric, t_metric)

    out = []
    for k, (w, ma) in enumerate(zip(omegas, assignments)):
        tau_star = true_tea_trimmed(sim, ma.retained)
        res = {m: MethodOutcome(m, status="not-applicable") for m in methods if m in skip}
        points = {}
        if "match1" in active:
            points["match1"] = estimate_tea_match1(ds, ma).tau_star
        if "match2" in active:
            points["match2"] = estimate_tea_match_bc(ds, ma, fits["lin"]).tau_star
        if "match3" in active:
            points["match3"] = estimate_tea_match_bc(ds, ma, fits["correct"]).tau_star
        for j, m in enumerate(match_methods):
            if boot is None:
                res[m] = MethodOutcome(m, points[m])
            else:
                res[m] = MethodOutcome(m, points[m], *percentile_interval(boot[k, j]))
        for m, key in (("pr1", "lin"), ("pr2", "correct")):
            if m in active:
                r = estimate_tea_poisson(ds, fits[key], ma.retained, cfg.pr_draws, seeds["pr"], m)
                res[m] = MethodOutcome(m, r.tau_star, *r.interval)
        if bp is not None:
            ti = estimate_tea_bart(ds, bp, ma.retained, cfg.bart_noise, seeds["bart"])
            res["bart"] = MethodOutcome("bart", ti.point, ti.lower, ti.upper)
        ordered = {m: res[m] for m in methods}
        out.append(ReplicationResult(sc.label, float(w), rep, rep_seed, float(nu), tau_star,
                                     sim.true_tau, ma.s, ds.n, ordered))
    return out


def _grid_job(args):
    sc, omegas, methods, base_seed, rep, cfg = args
    return run_replication_grid(sc, omegas, methods, replication_seed(base_seed, rep), cfg, rep)


def run_study(sc: SimScenario, omega_fractions: Sequence[float] = OMEGA_FRACTIONS,
              methods: Sequence[str] = METHODS, reps: int = 200, base_seed: int = 0,
              config: HarnessConfig | None = None, workers: int = 1,
              progress=None) -> list[ReplicationResult]:
    """Replications ``0..reps-1``; results sorted by (rep, omega)."""
    cfg = config if config is not None else HarnessConfig()
    methods = parse_methods(methods)
    jobs = [(sc, tuple(omega_fractions), methods, base_seed, r, cfg) for r in range(reps)]
    results = []
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            for k, rows in enumerate(pool.map(_grid_job, jobs)):
                results.extend(rows)
                if progress:
                    progress(k + 1, reps)
    else:
        for k, job in enumerate(jobs):
            results.extend(_grid_job(job))
            if progress:
                progress(k + 1, reps)
    results.sort(key=lambda r: (r.rep, r.omega_fraction))
    return results


# ---------------------------------------------------------------- summaries


@dataclass(frozen=True)
class MethodSummary:
    method: str
    n: int
    bias_fraction: float      # mean |point - tau*| / tau*
    abs_mean_bias: float      # |mean (point - tau*) / tau*|
    coverage: float
    point: float
    lower: float
    upper: float
    applicable: bool = True


@dataclass(frozen=True)
class SummaryRow:
    scenario: str
    omega_fraction: float
    n_reps: int
    n_failed: int
    s_over_n: float
    taustar_over_tau: float
    tau: float
    methods: dict


@dataclass(frozen=True)
class SummaryTable:
    scenario: str
    rows: tuple

    def row(self, omega_fraction: float) -> SummaryRow:
        for r in self.rows:
            if math.isclose(r.omega_fraction, omega_fraction, abs_tol=1e-12):
                return r
        raise KeyError(omega_fraction)


def _summarize_method(method, outcomes, tau_star):
    if all(o.status == "not-applicable" for o in outcomes):
        nan = math.nan
        return MethodSummary(method, 0, nan, nan, nan, nan, nan, nan, applicable=False)
    point = np.array([o.point for o in outcomes])
    lower = np.array([o.lower for o in outcomes])
    upper = np.array([o.upper for o in outcomes])
    rel = (point - tau_star) / tau_star
    has_iv = np.isfinite(lower) & np.isfinite(upper)
    cover = float(np.mean((lower <= tau_star) & (tau_star <= upper))) if has_iv.all() else math.nan
    return MethodSummary(method, len(outcomes), float(np.mean(np.abs(rel))),
                         float(abs(np.mean(rel))), cover, float(np.mean(point)),
                         float(np.mean(lower)), float(np.mean(upper)))


def summarize(results: Sequence[ReplicationResult]) -> SummaryTable:
    """Per-tolerance means over the successful replications.

    Bias and coverage are measured against each replication's own trimmed
    truth ``tau*``.
    """
    if not results:
        raise ValueError("no replications to summarize")
    labels = {r.scenario for r in results}
    if len(labels) != 1:
        raise ValueError(f"mixed scenarios in one summary: {sorted(labels)}")
    rows = []
    for w in sorted({r.omega_fraction for r in results}):
        group = [r for r in results if r.omega_fraction == w]
        good = sorted((r for r in group if r.ok), key=lambda r: r.rep)
        if not good:
            raise ValueError(f"every replication failed at omega fraction {w}")
        tau_star = np.array([r.tau_star for r in good])
        methods = {}
        for m in good[0].methods:
            methods[m] = _summarize_method(m, [r.methods[m] for r in good], tau_star)
        rows.append(SummaryRow(
            good[0].scenario, w, len(good), len(group) - len(good),
            float(np.mean([r.s / r.n for r in good])),
            float(np.mean([r.tau_star / r.tau for r in good])),
            float(np.mean([r.tau for r in good])), methods))
    return SummaryTable(labels.pop(), tuple(rows))
