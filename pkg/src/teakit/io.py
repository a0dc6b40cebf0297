"""CSV ingestion and results serialization.

Dataset files have one row per unit and the columns ``id``, ``t1_<name>``
(one per treatment), ``t2_<name>`` (same names, same order), ``x_<name>``
(one per confounder), ``y`` and ``pop``. Empty fields mark missing values;
such rows are dropped by validation and reported.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np

from .data import Dataset, DatasetError, validate_dataset
from .erf import ErfInput
from .harness import LABELS, METHODS, SummaryTable
from .simulate import PUBLISHED_TAU, SimDataset

__all__ = ["load_csv", "write_dataset", "write_truth", "write_results", "read_rows",
           "write_estimates", "load_erf_csv", "RESULT_FIELDS"]

RESULT_FIELDS = ("scenario", "omega_fraction", "method", "n_reps", "n_failed", "bias_fraction",
                 "abs_mean_bias", "coverage", "s_over_n", "taustar_over_tau", "point",
                 "lower", "upper")


def _fmt(v) -> str:
    """Shortest round-trip decimal for floats."""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def _parse_header(header: list[str]):
    header = [h.strip() for h in header]
    if len(set(header)) != len(header):
        raise DatasetError("line 1: duplicate column names")
    for need in ("id", "y", "pop"):
        if need not in header:
            raise DatasetError(f"line 1: missing column {need!r}")
    t1 = [h for h in header if h.startswith("t1_")]
    t2 = [h for h in header if h.startswith("t2_")]
    xs = [h for h in header if h.startswith("x_")]
    other = set(header) - set(t1) - set(t2) - set(xs) - {"id", "y", "pop"}
    if other:
        raise DatasetError(f"line 1: unexpected columns {sorted(other)}")
    if not t1:
        raise DatasetError("line 1: no t1_ treatment columns")
    if not xs:
        raise DatasetError("line 1: no x_ confounder columns")
    t1_names = [h[3:] for h in t1]
    t2_names = [h[3:] for h in t2]
    if t1_names != t2_names:
        raise DatasetError(f"line 1: t2 columns {t2_names} must name the t1 columns "
                           f"{t1_names} in the same order")
    col = {h: k for k, h in enumerate(header)}
    return (col, [col[h] for h in t1], [col[h] for h in t2], [col[h] for h in xs],
            t1_names, [h[2:] for h in xs])


def load_csv(path) -> Dataset:
    """Read and validate a dataset file; parse errors name the line."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file, header expected") from None
        col, i1, i2, ix, t_names, x_names = _parse_header(header)
        rows = []
        for line_no, rec in enumerate(reader, start=2):
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) != len(header):
                raise DatasetError(f"line {line_no}: {len(rec)} fields, header has {len(header)}")

            def num(k, name):
                text = rec[k].strip()
                if text == "":
                    return None
                try:
                    return float(text)
                except ValueError:
                    raise DatasetError(
                        f"line {line_no}: column {name!r}: cannot parse {text!r}") from None

            rows.append({
                "id": rec[col["id"]].strip(),
                "t1": [num(k, header[k]) for k in i1],
                "t2": [num(k, header[k]) for k in i2],
                "x": [num(k, header[k]) for k in ix],
                "y": num(col["y"], "y"),
                "pop": num(col["pop"], "pop"),
            })
    return validate_dataset(rows, t_names, x_names)


def write_dataset(ds: Dataset, path) -> None:
    header = (["id"] + [f"t1_{n}" for n in ds.treatment_names]
              + [f"t2_{n}" for n in ds.treatment_names]
              + [f"x_{n}" for n in ds.confounder_names] + ["y", "pop"])
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(ds.n):
            w.writerow([ds.ids[i], *map(_fmt, ds.t1[i]), *map(_fmt, ds.t2[i]),
                        *map(_fmt, ds.x[i]), int(ds.y[i]), int(ds.pop[i])])


def write_truth(sim: SimDataset, path) -> None:
    """Sidecar with the expected factual/counterfactual counts and true TEA."""
    doc = {
        "scenario": sim.scenario.label,
        "seed": sim.seed,
        "true_tau": sim.true_tau,
        "ids": [str(i) for i in sim.dataset.ids],
        "lambda": sim.lam.tolist(),
        "lambda_cf": sim.lam_cf.tolist(),
    }
    Path(path).write_text(json.dumps(doc))


# ---------------------------------------------------------------- results


def _summary_records(tables: Sequence[SummaryTable]) -> list[dict]:
    out = []
    for table in tables:
        for row in table.rows:
            for m, ms in row.methods.items():
                out.append({
                    "scenario": row.scenario, "omega_fraction": row.omega_fraction,
                    "method": m,
                    "n_reps": ms.n, "n_failed": row.n_failed,
                    "bias_fraction": ms.bias_fraction, "abs_mean_bias": ms.abs_mean_bias,
                    "coverage": ms.coverage, "s_over_n": row.s_over_n,
                    "taustar_over_tau": row.taustar_over_tau, "point": ms.point,
                    "lower": ms.lower, "upper": ms.upper,
                })
    return out


def _cell(ms, bias: str) -> str:
    if not ms.applicable:
        return "-"
    b = ms.abs_mean_bias if bias == "abs_mean" else ms.bias_fraction
    cov = "" if math.isnan(ms.coverage) else f" ({ms.coverage:.2f})"
    return f"{b:.2f}{cov}"


def format_table(tables: Sequence[SummaryTable], bias: str = "abs_mean") -> str:
    """Aligned text: bias fraction (interval coverage) per method."""
    methods = [m for m in METHODS if any(m in r.methods for t in tables for r in t.rows)]
    head = ["scenario", "omega", "S/N", "tau*/tau"] + [LABELS[m] for m in methods]
    lines = []
    for t in tables:
        for r in t.rows:
            tau = PUBLISHED_TAU.get(t.scenario)
            label = f"S-{t.scenario[1:]} (tau={r.tau:.0f})" if tau else t.scenario
            lines.append([label, f"{r.omega_fraction:.2f}", f"{r.s_over_n:.2f}",
                          f"{r.taustar_over_tau:.2f}"]
                         + [_cell(r.methods[m], bias) if m in r.methods else "" for m in methods])
    widths = [max(len(x) for x in col) for col in zip(head, *lines)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    what = "|mean relative error|" if bias == "abs_mean" else "mean |relative error|"
    out = [f"bias = {what} vs tau*; parentheses: 95% interval coverage of tau*",
           fmt.format(*head), fmt.format(*("-" * w for w in widths))]
    out += [fmt.format(*ln) for ln in lines]
    return "\n".join(out) + "\n"


def write_results(result: SummaryTable | Sequence[SummaryTable], path, fmt: str = "text",
                  bias: str = "abs_mean") -> None:
    """Write summary tables as aligned text or as one CSV row per (scenario, omega, method)."""
    tables = [result] if isinstance(result, SummaryTable) else list(result)
    if fmt == "text":
        text = format_table(tables, bias)
        _write_text(path, text)
    elif fmt == "rows":
        _write_rows(path, RESULT_FIELDS, _summary_records(tables))
    else:
        raise ValueError(f"unknown format {fmt!r}; use 'text' or 'rows'")


def _write_text(path, text: str) -> None:
    if hasattr(path, "write"):
        path.write(text)
    else:
        Path(path).write_text(text)


def _write_rows(path, fields: Sequence[str], records: Iterable[dict]) -> None:
    def emit(fh: TextIO):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for rec in records:
            w.writerow([_fmt(rec[f]) for f in fields])

    if hasattr(path, "write"):
        emit(path)
    else:
        with Path(path).open("w", newline="") as fh:
            emit(fh)


def read_rows(path) -> list[dict]:
    """Parse a rows-format file back; numeric fields become floats."""
    out = []
    with Path(path).open(newline="") as fh:
        for rec in csv.DictReader(fh):
            row = {}
            for k, v in rec.items():
                try:
                    row[k] = float(v)
                except ValueError:
                    row[k] = v
            out.append(row)
    return out


ESTIMATE_FIELDS = ("method", "point", "lower", "upper", "s", "n", "s_over_n", "interval_method")


def write_estimates(records: Sequence[dict], path, fmt: str = "text") -> None:
    """Per-method estimates on a user dataset."""
    if fmt == "rows":
        _write_rows(path, ESTIMATE_FIELDS, records)
        return
    if fmt != "text":
        raise ValueError(f"unknown format {fmt!r}; use 'text' or 'rows'")
    lines = []
    for r in records:
        iv = "" if math.isnan(r["lower"]) else f"  95% [{r['lower']:.1f}, {r['upper']:.1f}] ({r['interval_method']})"
        lines.append(f"{LABELS.get(r['method'], r['method']):<8} TEA = {r['point']:.1f}{iv}"
                     f"  S/N = {r['s']}/{r['n']} = {r['s_over_n']:.3f}")
    _write_text(path, "\n".join(lines) + "\n")


def load_erf_csv(path):
    """Rows of ``beta, pi0, pop, delta_x``."""
    cells = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"beta", "pi0", "pop", "delta_x"}
        if reader.fieldnames is None or not need <= {f.strip() for f in reader.fieldnames}:
            raise DatasetError(f"line 1: ERF file needs columns {sorted(need)}")
        for line_no, rec in enumerate(reader, start=2):
            rec = {k.strip(): v for k, v in rec.items()}
            try:
                cells.append(ErfInput(*(float(rec[k]) for k in ("beta", "pi0", "pop", "delta_x"))))
            except (TypeError, ValueError) as exc:
                raise DatasetError(f"line {line_no}: {exc}") from None
    if not cells:
        raise DatasetError(f"{path}: no ERF rows")
    return cells
