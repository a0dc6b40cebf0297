"""Unit and dataset containers shared by every estimator.

A :class:`Dataset` stores its units column-wise as numpy arrays; the
row view (:class:`Unit`) is built on demand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np


class TeaError(Exception):
    """Base class for package errors."""


class DatasetError(TeaError):
    """Input data cannot be turned into a valid :class:`Dataset`."""


class NumericalError(TeaError):
    """A numerical routine failed (singular system, no convergence)."""


@dataclass(frozen=True)
class Unit:
    id: str
    t1: tuple[float, ...]
    t2: tuple[float, ...]
    x: tuple[float, ...]
    y: int
    pop: int

    @property
    def rate(self) -> float:
        return rate(self)


@dataclass(frozen=True)
class ValidationReport:
    n_input: int
    dropped: tuple[tuple[str, str], ...] = ()

    @property
    def n_dropped(self) -> int:
        return len(self.dropped)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Validated, immutable collection of units.

    Attributes
    ----------
    ids : ndarray of str, shape (N,)
    t1, t2 : ndarray, shape (N, Q)
        Factual and counterfactual treatment vectors.
    x : ndarray, shape (N, p)
        Confounders.
    y, pop : ndarray of int64, shape (N,)
        Event counts and at-risk populations.
    """

    ids: np.ndarray
    t1: np.ndarray
    t2: np.ndarray
    x: np.ndarray
    y: np.ndarray
    pop: np.ndarray
    treatment_names: tuple[str, ...]
    confounder_names: tuple[str, ...]
    report: ValidationReport | None = field(default=None, compare=False)

    def __post_init__(self):
        for name in ("t1", "t2", "x", "y", "pop"):
            getattr(self, name).setflags(write=False)

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def q_dim(self) -> int:
        return self.t1.shape[1]

    @property
    def p_dim(self) -> int:
        return self.x.shape[1]

    @property
    def rates(self) -> np.ndarray:
        return self.y / self.pop

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> Unit:
        return Unit(
            id=str(self.ids[i]),
            t1=tuple(float(v) for v in self.t1[i]),
            t2=tuple(float(v) for v in self.t2[i]),
            x=tuple(float(v) for v in self.x[i]),
            y=int(self.y[i]),
            pop=int(self.pop[i]),
        )

    @property
    def units(self) -> list[Unit]:
        return [self[i] for i in range(self.n)]

    def to_records(self) -> list[dict[str, Any]]:
        return [
            {"id": u.id, "t1": list(u.t1), "t2": list(u.t2), "x": list(u.x),
             "y": u.y, "pop": u.pop}
            for u in self.units
        ]

    def take(self, index: Sequence[int] | np.ndarray) -> "Dataset":
        """Rows ``index`` (with repetition allowed) as a new dataset.

        Ids of repeated rows are suffixed so they stay unique.
        """
        index = np.asarray(index, dtype=np.intp)
        ids = self.ids[index]
        if len(np.unique(index)) != len(index):
            ids = np.array([f"{v}#{k}" for k, v in enumerate(ids)], dtype=object)
        return Dataset(
            ids=ids, t1=self.t1[index], t2=self.t2[index], x=self.x[index],
            y=self.y[index], pop=self.pop[index],
            treatment_names=self.treatment_names,
            confounder_names=self.confounder_names,
        )

    def equals(self, other: "Dataset") -> bool:
        return (
            self.treatment_names == other.treatment_names
            and self.confounder_names == other.confounder_names
            and np.array_equal(self.ids, other.ids)
            and all(np.array_equal(getattr(self, k), getattr(other, k))
                    for k in ("t1", "t2", "x", "y", "pop"))
        )


def rate(u: Unit) -> float:
    """Event rate ``y / pop``."""
    return u.y / u.pop


def _is_missing(v) -> bool:
    if v is None:
        return True
    if isinstance(v, str):
        return v.strip() == ""
    try:
        return math.isnan(v)
    except TypeError:
        return False


def _as_int(v) -> int:
    f = float(v)
    if not math.isfinite(f) or f != int(f):
        raise ValueError(f"not an integer: {v!r}")
    return int(f)


def from_arrays(t1, t2, x, y, pop=None, ids=None, treatment_names=None,
                confounder_names=None) -> Dataset:
    """Build a dataset directly from arrays (no rows are dropped)."""
    t1 = np.array(t1, dtype=np.float64, ndmin=2)
    t2 = np.array(t2, dtype=np.float64, ndmin=2)
    x = np.array(x, dtype=np.float64, ndmin=2)
    n = t1.shape[0]
    if t2.shape != t1.shape or x.shape[0] != n:
        raise DatasetError("array shapes disagree")
    y = np.asarray(y)
    pop = np.ones(n, dtype=np.int64) if pop is None else np.asarray(pop)
    if y.shape != (n,) or pop.shape != (n,):
        raise DatasetError("y and pop must be 1-d with one entry per unit")
    if not (np.all(np.isfinite(t1)) and np.all(np.isfinite(t2)) and np.all(np.isfinite(x))):
        raise DatasetError("non-finite treatment or confounder value")
    if np.any(y != np.round(y)) or np.any(pop != np.round(pop)):
        raise DatasetError("y and pop must be integers")
    y = y.astype(np.int64)
    pop = pop.astype(np.int64)
    if np.any(pop < 1) or np.any(y < 0):
        raise DatasetError("pop must be >= 1 and y >= 0")
    ids = np.array([str(i) for i in range(n)] if ids is None else [str(i) for i in ids],
                   dtype=object)
    if len(set(ids)) != n:
        raise DatasetError("duplicate unit ids")
    return Dataset(
        ids=ids, t1=t1, t2=t2, x=x, y=y, pop=pop,
        treatment_names=tuple(treatment_names or (f"t{k}" for k in range(t1.shape[1]))),
        confounder_names=tuple(confounder_names or (f"x{k}" for k in range(x.shape[1]))),
        report=ValidationReport(n_input=n),
    )


def validate_dataset(
    rows: Iterable[Mapping[str, Any]],
    treatment_names: Sequence[str] | None = None,
    confounder_names: Sequence[str] | None = None,
) -> Dataset:
    """Validate raw records and assemble a :class:`Dataset`.

    Each record maps ``id``, ``t1``, ``t2``, ``x`` (sequences), ``y`` and
    ``pop``. Records with a missing field, a non-finite value or ``pop == 0``
    are dropped and listed in ``Dataset.report``. Dimension mismatches and
    duplicate ids are fatal.
    """
    rows = list(rows)
    q_dim = len(treatment_names) if treatment_names is not None else None
    p_dim = len(confounder_names) if confounder_names is not None else None
    kept = []
    dropped = []
    seen = set()
    for row in rows:
        uid = str(row.get("id", ""))
        t1, t2, x = row.get("t1"), row.get("t2"), row.get("x")
        if t1 is None or t2 is None or x is None:
            dropped.append((uid, "missing field"))
            continue
        if q_dim is None:
            q_dim = len(t1)
        if p_dim is None:
            p_dim = len(x)
        if len(t1) != q_dim or len(t2) != q_dim:
            raise DatasetError(
                f"unit {uid!r}: treatment length {len(t1)}/{len(t2)}, expected {q_dim}")
        if len(x) != p_dim:
            raise DatasetError(
                f"unit {uid!r}: confounder length {len(x)}, expected {p_dim}")
        values = [row.get("y"), row.get("pop"), *t1, *t2, *x]
        if _is_missing(row.get("id")) or any(_is_missing(v) for v in values):
            dropped.append((uid, "missing field"))
            continue
        try:
            vec = [float(v) for v in (*t1, *t2, *x)]
            y, pop = _as_int(row["y"]), _as_int(row["pop"])
        except (TypeError, ValueError) as exc:
            dropped.append((uid, f"unparseable value ({exc})"))
            continue
        if not all(math.isfinite(v) for v in vec):
            dropped.append((uid, "non-finite value"))
            continue
        if pop == 0:
            dropped.append((uid, "zero population"))
            continue
        if pop < 0 or y < 0:
            dropped.append((uid, "negative count"))
            continue
        if uid in seen:
            raise DatasetError(f"duplicate unit id {uid!r}")
        seen.add(uid)
        kept.append((uid, vec, y, pop))
    if not kept:
        raise DatasetError("no usable units")
    n = len(kept)
    mat = np.array([k[1] for k in kept], dtype=np.float64).reshape(n, 2 * q_dim + p_dim)
    if treatment_names is None:
        treatment_names = [f"t{k}" for k in range(q_dim)]
    if confounder_names is None:
        confounder_names = [f"x{k}" for k in range(p_dim)]
    return Dataset(
        ids=np.array([k[0] for k in kept], dtype=object),
        t1=mat[:, :q_dim].copy(),
        t2=mat[:, q_dim:2 * q_dim].copy(),
        x=mat[:, 2 * q_dim:].copy(),
        y=np.array([k[2] for k in kept], dtype=np.int64),
        pop=np.array([k[3] for k in kept], dtype=np.int64),
        treatment_names=tuple(treatment_names),
        confounder_names=tuple(confounder_names),
        report=ValidationReport(n_input=len(rows), dropped=tuple(dropped)),
    )
