"""Bayesian additive regression trees for event rates.

The sum-of-trees model is fitted to the rate response on the predictors
``(t1, X)`` by Metropolis-within-Gibbs backfitting. Posterior predictive
draws at ``(t2, X)`` give the BART estimator of total events avoided.

Trees live in fixed-size heap arrays during sampling (children of node
``k`` are ``2k+1`` and ``2k+2``). Every kept state is exported to a compact
preorder forest, which is what prediction uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np
from scipy.stats import chi2

from . import _kernels
from .data import Dataset, NumericalError

__all__ = ["BartConfig", "BartPosterior", "TeaInterval", "fit_bart", "posterior_predict",
           "estimate_tea_bart", "save_posterior", "load_posterior", "dump_text"]


@dataclass(frozen=True)
class BartConfig:
    """Hyperparameters. ``k`` prior sds of the summed leaf means span half the
    standardized response range; ``alpha * (1 + d) ** -beta`` is the prior
    probability that a node at depth ``d`` splits."""

    n_trees: int = 50
    alpha: float = 0.95
    beta: float = 2.0
    k: float = 2.0
    nu_df: float = 3.0
    q: float = 0.90
    n_burn: int = 500
    n_keep: int = 1000
    n_cuts: int = 100
    max_depth: int = 8
    p_grow: float = 0.5
    p_prune: float = 0.4

    def __post_init__(self):
        if self.n_trees < 1 or self.n_keep < 1 or self.n_burn < 0:
            raise ValueError("n_trees and n_keep must be positive, n_burn nonnegative")
        if not (0 < self.alpha < 1) or self.beta < 0:
            raise ValueError("tree prior needs 0 < alpha < 1 and beta >= 0")
        if self.k <= 0 or self.nu_df <= 0 or not (0 < self.q < 1):
            raise ValueError("k, nu_df must be positive and 0 < q < 1")
        if not (2 <= self.n_cuts <= 32767):
            raise ValueError("n_cuts must be in [2, 32767]")
        if not (1 <= self.max_depth <= 12):
            raise ValueError("max_depth must be in [1, 12]")
        if self.p_grow <= 0 or self.p_prune <= 0 or self.p_grow + self.p_prune > 1:
            raise ValueError("need p_grow, p_prune > 0 and p_grow + p_prune <= 1")


@dataclass(frozen=True, eq=False)
class BartPosterior:
    """Kept posterior states in compact preorder form.

    Forest values are in standardized units; ``shift`` and ``scale`` map them
    back (``y = shift + scale * f``). ``sigma`` is already in response units.
    """

    config: BartConfig
    roots: np.ndarray          # (H, J) offsets into the node arrays
    var: np.ndarray            # split variable, -1 for a leaf
    cut: np.ndarray            # split goes left iff x[var] < cut
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray          # leaf mean (standardized)
    sigma: np.ndarray          # (H,)
    shift: float
    scale: float
    train_fit: np.ndarray | None = None   # (H, N) in response units
    sigma_burn: np.ndarray | None = None
    accept: np.ndarray = field(default_factory=lambda: np.zeros(6, dtype=np.int64))
    seed: int | None = None
    grid_dim: int = 0

    @property
    def h_count(self) -> int:
        return self.roots.shape[0]

    @property
    def n_trees(self) -> int:
        return self.roots.shape[1]

    def predict_mean(self, x: np.ndarray, backend=None) -> np.ndarray:
        """Sum-of-trees values in response units, shape ``(H, n)``."""
        x = np.ascontiguousarray(np.atleast_2d(x), dtype=np.float64)
        if x.shape[1] != self.grid_dim:
            raise ValueError(f"expected {self.grid_dim} predictors, got {x.shape[1]}")
        kern = _kernels.get(backend)
        f = kern.forest_predict(x, self.roots, self.var, self.cut, self.left, self.right,
                                self.value)
        return self.shift + self.scale * np.asarray(f)


@dataclass(frozen=True)
class TeaInterval:
    point: float
    lower: float
    upper: float
    h_count: int
    draws: np.ndarray = field(repr=False, default=None)
    retained: np.ndarray | None = field(repr=False, default=None)


def cut_grid(x: np.ndarray, n_cuts: int) -> np.ndarray:
    """``n_cuts`` equally spaced interior points of each column's range."""
    lo = x.min(axis=0)
    hi = x.max(axis=0)
    frac = np.arange(1, n_cuts + 1) / (n_cuts + 1)
    return np.ascontiguousarray(lo[:, None] + (hi - lo)[:, None] * frac[None, :])


def bin_predictors(x: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Number of cutpoints ``<= x`` per entry; ``x < grid[v, c]`` iff ``bin <= c``."""
    out = np.empty(x.shape, dtype=np.int16)
    for v in range(x.shape[1]):
        out[:, v] = np.searchsorted(grid[v], x[:, v], side="right")
    return out


def _initial_sigma(xs: np.ndarray, ys: np.ndarray) -> float:
    n, d = xs.shape
    if n > d + 1:
        design = np.column_stack([np.ones(n), xs])
        coef = np.linalg.lstsq(design, ys, rcond=None)[0]
        resid = ys - design @ coef
        return float(math.sqrt(np.sum(resid * resid) / (n - d - 1)))
    return float(np.std(ys, ddof=1))


def fit_bart(ds: Dataset, config: BartConfig | None = None, seed: int = 0,
             backend=None, keep_train_fit: bool = True) -> BartPosterior:
    """Fit the sum-of-trees model to ``ds.rates`` on ``(t1, X)``."""
    cfg = config if config is not None else BartConfig()
    if ds.n < 20:
        raise ValueError("BART needs at least 20 units")
    kern = _kernels.get(backend)
    xs = np.ascontiguousarray(np.column_stack([ds.t1, ds.x]), dtype=np.float64)
    y = ds.rates
    lo, hi = float(y.min()), float(y.max())
    shift = 0.5 * (lo + hi)
    scale = hi - lo if hi > lo else 1.0
    ys = np.ascontiguousarray((y - shift) / scale)

    grid = cut_grid(xs, cfg.n_cuts)
    xb = bin_predictors(xs, grid)
    n, n_trees = ds.n, cfg.n_trees
    tau = 0.5 / (cfg.k * math.sqrt(n_trees))
    sigma_hat = max(_initial_sigma(xs, ys), 1e-6)
    lam = sigma_hat ** 2 * chi2.ppf(1.0 - cfg.q, cfg.nu_df) / cfg.nu_df

    depth = np.arange(cfg.max_depth + 1, dtype=np.float64)
    p_split = cfg.alpha * (1.0 + depth) ** (-cfg.beta)
    p_split[cfg.max_depth] = 0.0
    with np.errstate(divide="ignore"):
        logp = np.log(p_split)
    log1mp = np.log1p(-p_split)

    n_nodes = 2 ** (cfg.max_depth + 1) - 1
    n_leaf_max = 2 ** cfg.max_depth
    status = np.zeros((n_trees, n_nodes), dtype=np.int8)
    status[:, 0] = 1
    var = np.zeros((n_trees, n_nodes), dtype=np.int32)
    cut = np.zeros((n_trees, n_nodes), dtype=np.int32)
    mu = np.zeros((n_trees, n_nodes))
    mu[:, 0] = float(np.mean(ys)) / n_trees
    leaf_of = np.zeros((n_trees, n), dtype=np.int64)
    tree_fit = np.repeat(mu[:, :1], n, axis=1)
    total_fit = np.ascontiguousarray(tree_fit.sum(axis=0))
    counts = np.zeros(6, dtype=np.int64)

    rng = np.random.default_rng(seed)
    sigma = sigma_hat
    h_total = cfg.n_keep
    kept = []
    sig_keep = np.empty(h_total)
    sig_burn = np.empty(cfg.n_burn)
    fits = np.empty((h_total, n)) if keep_train_fit else None
    for it in range(cfg.n_burn + h_total):
        u = 1.0 - rng.random((n_trees, 5))
        z = rng.standard_normal((n_trees, n_leaf_max))
        kern.bart_sweep(xb, ys, status, var, cut, mu, leaf_of, tree_fit, total_fit,
                        sigma, tau, logp, log1mp, cfg.max_depth, cfg.p_grow, cfg.p_prune,
                        cfg.n_cuts, u, z, counts)
        resid = ys - total_fit
        ssr = float(np.dot(resid, resid))
        sigma = math.sqrt((cfg.nu_df * lam + ssr) / rng.chisquare(cfg.nu_df + n))
        if not math.isfinite(sigma) or sigma <= 0:
            raise NumericalError(f"sigma draw degenerate at iteration {it}")
        h = it - cfg.n_burn
        if h < 0:
            sig_burn[it] = sigma * scale
            continue
        kept.append(kern.export_forest(status, var, cut, mu, grid))
        sig_keep[h] = sigma * scale
        if fits is not None:
            fits[h] = shift + scale * total_fit

    sizes = np.array([len(k[0]) for k in kept], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    roots = np.ascontiguousarray(np.stack([k[5] for k in kept]) + offsets[:, None])
    left = np.concatenate([np.where(k[2] >= 0, k[2] + o, -1) for k, o in zip(kept, offsets)])
    right = np.concatenate([np.where(k[3] >= 0, k[3] + o, -1) for k, o in zip(kept, offsets)])
    return BartPosterior(
        config=cfg, roots=roots,
        var=np.ascontiguousarray(np.concatenate([k[0] for k in kept]), dtype=np.int32),
        cut=np.ascontiguousarray(np.concatenate([k[1] for k in kept])),
        left=np.ascontiguousarray(left, dtype=np.int64),
        right=np.ascontiguousarray(right, dtype=np.int64),
        value=np.ascontiguousarray(np.concatenate([k[4] for k in kept])),
        sigma=sig_keep, shift=shift, scale=scale, train_fit=fits, sigma_burn=sig_burn,
        accept=counts, seed=seed, grid_dim=xs.shape[1])


def posterior_predict(bp: BartPosterior, t, x, include_noise: bool = True,
                      seed: int | None = None, rng: np.random.Generator | None = None,
                      backend=None) -> np.ndarray:
    """Posterior predictive draws of the rate at ``(t, x)``.

    A single point gives ``H`` values; stacked rows give ``(H, n)``.
    """
    t = np.asarray(t, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    single = t.ndim == 1
    pts = np.column_stack([np.atleast_2d(t), np.atleast_2d(x)])
    out = bp.predict_mean(pts, backend)
    if include_noise:
        gen = rng if rng is not None else np.random.default_rng(seed)
        out = out + bp.sigma[:, None] * gen.standard_normal(out.shape)
    return out[:, 0] if single else out


def estimate_tea_bart(ds: Dataset, bp: BartPosterior, retained, include_noise: bool = True,
                      seed: int = 0, chunk: int = 2048, backend=None) -> TeaInterval:
    """Posterior of ``sum_i (Ybar*_i - y*_i) pop_i`` over the retained units."""
    retained = np.asarray(retained, dtype=np.intp)
    if retained.size == 0:
        raise ValueError("no retained units")
    rng = np.random.default_rng(seed)
    draws = np.zeros(bp.h_count)
    for a in range(0, retained.size, chunk):
        idx = retained[a:a + chunk]
        pred = posterior_predict(bp, ds.t2[idx], ds.x[idx], include_noise, rng=rng,
                                 backend=backend)
        pop = ds.pop[idx].astype(np.float64)
        draws += (pred - ds.rates[idx]) @ pop
    lo, hi = np.percentile(draws, [2.5, 97.5])
    return TeaInterval(float(np.mean(draws)), float(lo), float(hi), bp.h_count, draws, retained)


# ---------------------------------------------------------------- persistence

_ARRAYS = ("roots", "var", "cut", "left", "right", "value", "sigma")


def save_posterior(bp: BartPosterior, path) -> None:
    """Binary dump (``.npz``) of the kept states."""
    arrays = {name: getattr(bp, name) for name in _ARRAYS}
    cfg = bp.config
    arrays["config"] = np.array([getattr(cfg, f) for f in cfg.__dataclass_fields__], dtype=np.float64)
    arrays["meta"] = np.array([bp.shift, bp.scale, bp.grid_dim], dtype=np.float64)
    np.savez(path, **arrays)


def load_posterior(path) -> BartPosterior:
    with np.load(path) as f:
        names = list(BartConfig.__dataclass_fields__)
        vals = {k: (int(v) if isinstance(BartConfig.__dataclass_fields__[k].default, int) else float(v))
                for k, v in zip(names, f["config"])}
        shift, scale, dim = f["meta"]
        return BartPosterior(BartConfig(**vals), *(f[a] for a in _ARRAYS),
                             shift=float(shift), scale=float(scale), grid_dim=int(dim))


def dump_text(bp: BartPosterior, fh: TextIO) -> None:
    """Per draw: ``draw h sigma``, then one line per tree in preorder.

    Internal nodes print as ``v:cut``, leaves as ``=value``.
    """
    for h in range(bp.h_count):
        fh.write(f"draw {h} {float(bp.sigma[h])!r}\n")
        for j in range(bp.n_trees):
            toks = []
            stack = [int(bp.roots[h, j])]
            while stack:
                k = stack.pop()
                if bp.var[k] < 0:
                    toks.append(f"={float(bp.shift / bp.n_trees + bp.scale * bp.value[k])!r}")
                else:
                    toks.append(f"{bp.var[k]}:{float(bp.cut[k])!r}")
                    stack.append(int(bp.right[k]))
                    stack.append(int(bp.left[k]))
            fh.write(" ".join(toks) + "\n")
