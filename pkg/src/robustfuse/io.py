"""Reading and writing summary files.

Two formats carry the same content — one record per source with an id, a
sample size, a point estimate, and an optional covariance stored as the lower
triangle in row-major order:

- CSV: header ``source_id,n,theta_1..theta_d[,cov_11,cov_21,cov_22,...]``
- JSON: array of objects ``{"id", "n", "theta", "cov_tril"?}``

Floats are emitted as shortest lossless decimals (at most 17 significant
digits), so emit(parse(f)) reproduces the numeric content exactly.
"""

from __future__ import annotations

import csv
import json
import math
import os

import numpy as np

from .exceptions import ParseError
from .model import IDENTITY, FusionProblem, SourceSummary

__all__ = [
    "tril_to_matrix",
    "matrix_to_tril",
    "tril_labels",
    "parse_summary_csv",
    "parse_summary_json",
    "load_problem",
    "write_summary_csv",
    "write_summary_json",
]


def tril_labels(d: int) -> list[str]:
    return [f"cov_{i + 1}{j + 1}" for i in range(d) for j in range(i + 1)]


def tril_to_matrix(values, d: int) -> np.ndarray:
    """Expand row-major lower-triangle values into a symmetric (d, d) matrix."""
    values = list(values)
    want = d * (d + 1) // 2
    if len(values) != want:
        raise ParseError(f"expected {want} lower-triangle entries for d={d}, got {len(values)}")
    mat = np.zeros((d, d))
    it = iter(values)
    for i in range(d):
        for j in range(i + 1):
            mat[i, j] = mat[j, i] = next(it)
    return mat


def matrix_to_tril(mat: np.ndarray) -> list[float]:
    mat = np.asarray(mat, dtype=float)
    d = mat.shape[0]
    return [float(mat[i, j]) for i in range(d) for j in range(i + 1)]


def _parse_float(text: str, what: str, record: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"{what}: not a number ({text!r})", record) from None
    if not math.isfinite(value):
        raise ParseError(f"{what}: must be finite, got {text!r}", record)
    return value


def _parse_n(raw, record: int) -> int:
    try:
        value = float(raw)
    except (TypeError, ValueError):
        raise ParseError(f"sample size: not a number ({raw!r})", record) from None
    if not math.isfinite(value) or value != int(value) or value < 1:
        raise ParseError(f"sample size must be a positive integer, got {raw!r}", record)
    return int(value)


def parse_summary_csv(path) -> list[SourceSummary]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file") from None
        header = [h.strip() for h in header]
        if header[:2] != ["source_id", "n"]:
            raise ParseError(f"header must start with source_id,n — got {header[:2]}")
        d = 0
        while 2 + d < len(header) and header[2 + d] == f"theta_{d + 1}":
            d += 1
        if d == 0:
            raise ParseError("no theta_1.. columns found in header")
        cov_cols = header[2 + d :]
        if cov_cols and cov_cols != tril_labels(d):
            raise ParseError(
                f"covariance columns must be exactly {tril_labels(d)}, got {cov_cols}"
            )
        sources = []
        for idx, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} cells, got {len(row)}", idx)
            sid = row[0].strip()
            if not sid:
                raise ParseError("empty source_id", idx)
            n = _parse_n(row[1].strip(), idx)
            theta = [_parse_float(row[2 + j], f"theta_{j + 1}", idx) for j in range(d)]
            cov = None
            if cov_cols:
                vals = [
                    _parse_float(row[2 + d + j], cov_cols[j], idx)
                    for j in range(len(cov_cols))
                ]
                cov = tril_to_matrix(vals, d)
            sources.append(SourceSummary(sid, n, np.array(theta), cov))
    if not sources:
        raise ParseError("no data records found")
    return sources


def parse_summary_json(path) -> list[SourceSummary]:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc}") from None
    if not isinstance(data, list) or not data:
        raise ParseError("expected a non-empty JSON array of source records")
    sources = []
    for idx, rec in enumerate(data, start=1):
        if not isinstance(rec, dict):
            raise ParseError("record is not an object", idx)
        missing = {"id", "n", "theta"} - rec.keys()
        if missing:
            raise ParseError(f"missing keys {sorted(missing)}", idx)
        theta = rec["theta"]
        if not isinstance(theta, list) or not theta:
            raise ParseError("theta must be a non-empty array", idx)
        theta_vals = [_parse_float(str(v), f"theta[{j}]", idx) for j, v in enumerate(theta)]
        cov = None
        if rec.get("cov_tril") is not None:
            tril = rec["cov_tril"]
            if not isinstance(tril, list):
                raise ParseError("cov_tril must be an array", idx)
            vals = [_parse_float(str(v), f"cov_tril[{j}]", idx) for j, v in enumerate(tril)]
            try:
                cov = tril_to_matrix(vals, len(theta_vals))
            except ParseError as exc:
                raise ParseError(str(exc), idx) from None
        sources.append(SourceSummary(str(rec["id"]), _parse_n(rec["n"], idx), np.array(theta_vals), cov))
    return sources


def load_problem(path, fmt: str | None = None, weighting=IDENTITY) -> FusionProblem:
    """Load a summary file into a fusion problem; format inferred from the
    extension unless given explicitly."""
    if fmt is None:
        fmt = "json" if os.path.splitext(str(path))[1].lower() == ".json" else "csv"
    if fmt not in ("csv", "json"):
        raise ParseError(f"unknown format {fmt!r}; expected 'csv' or 'json'")
    try:
        sources = parse_summary_csv(path) if fmt == "csv" else parse_summary_json(path)
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from None
    return FusionProblem(tuple(sources), weighting)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_summary_csv(path, sources) -> None:
    sources = list(sources)
    d = sources[0].d
    with_cov = any(s.cov is not None for s in sources)
    header = ["source_id", "n"] + [f"theta_{j + 1}" for j in range(d)]
    if with_cov:
        header += tril_labels(d)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for s in sources:
            row = [s.source_id, str(s.n)] + [_fmt(v) for v in s.theta]
            if with_cov:
                if s.cov is None:
                    raise ParseError(
                        f"source {s.source_id!r} has no covariance but others do; "
                        "CSV needs a rectangular layout"
                    )
                row += [_fmt(v) for v in matrix_to_tril(s.cov)]
            writer.writerow(row)


def write_summary_json(path, sources) -> None:
    records = []
    for s in sources:
        rec = {"id": s.source_id, "n": s.n, "theta": [float(v) for v in s.theta]}
        if s.cov is not None:
            rec["cov_tril"] = matrix_to_tril(s.cov)
        records.append(rec)
    with open(path, "w") as fh:
        json.dump(records, fh, indent=2)
        fh.write("\n")
