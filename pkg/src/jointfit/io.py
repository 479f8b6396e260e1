"""CSV ingestion and JSON result serialization.

Longitudinal table: one row per measurement with columns ``id, time, y``.
Survival table: one row per subject with ``id, time, event`` followed by any
number of baseline covariate columns (every column not in the column map).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataFormatError, InvalidInputError
from .model import LongitudinalRecord, SubjectData, TimeBasis, parameter_names


@dataclass(frozen=True)
class ColumnMap:
    id: str = "id"
    time: str = "time"
    response: str = "y"
    event: str = "event"


@dataclass
class DatasetBundle:
    longitudinal_rows: list
    survival_rows: list
    basis_spec: str
    columns: ColumnMap = field(default_factory=ColumnMap)
    covariate_names: tuple = ()


def _read_table(path, required: Sequence[str]):
    """Header and rows as (line number, dict); line 1 is the header."""
    path = Path(path)
    try:
        handle = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise DataFormatError(f"cannot open: {exc.strerror}", file=str(path)) from None
    with handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError("file is empty (no header row)", file=str(path)) from None
        header = [h.strip() for h in header]
        for name in required:
            if name not in header:
                raise DataFormatError("missing column", file=str(path), row=1, column=name)
        if len(set(header)) != len(header):
            raise DataFormatError("duplicate column names in header", file=str(path), row=1)
        rows = []
        for line, cells in enumerate(reader, start=2):
            if not cells or all(not c.strip() for c in cells):
                continue
            if len(cells) != len(header):
                raise DataFormatError(
                    f"expected {len(header)} cells, found {len(cells)}", file=str(path), row=line
                )
            rows.append((line, dict(zip(header, (c.strip() for c in cells)))))
    return header, rows


def _number(text, path, line, column, nonneg=False):
    try:
        value = float(text)
    except ValueError:
        raise DataFormatError(f"cannot parse {text!r} as a number", file=str(path), row=line, column=column) from None
    if not math.isfinite(value):
        raise DataFormatError("value must be finite", file=str(path), row=line, column=column)
    if nonneg and value < 0:
        raise DataFormatError("value must be nonnegative", file=str(path), row=line, column=column)
    return value


def _event(text, path, line, column):
    if text in ("0", "1"):
        return text == "1"
    try:
        value = float(text)
    except ValueError:
        value = None
    if value in (0.0, 1.0):
        return value == 1.0
    raise DataFormatError(f"event must be 0 or 1, got {text!r}", file=str(path), row=line, column=column)


def load_bundle(
    longitudinal_path,
    survival_path,
    basis: str | TimeBasis = "intercept+slope",
    truncate: bool = False,
    columns: ColumnMap = ColumnMap(),
) -> list[SubjectData]:
    """Merge the two tables into validated subjects, in survival-table order.

    Measurements later than the subject's event/censoring time are rejected
    with their row numbers unless ``truncate`` is set, in which case they are
    dropped.
    """
    basis = basis if isinstance(basis, TimeBasis) else TimeBasis.from_name(basis)
    c = columns
    lpath, spath = str(longitudinal_path), str(survival_path)
    s_header, s_rows = _read_table(spath, [c.id, c.time, c.event])
    l_header, l_rows = _read_table(lpath, [c.id, c.time, c.response])
    covariates = [h for h in s_header if h not in (c.id, c.time, c.event)]
    if not s_rows:
        raise DataFormatError("survival table has no data rows", file=spath)
    if not l_rows:
        raise DataFormatError("longitudinal table has no data rows (every subject needs n_i >= 1)", file=lpath)

    survival = {}
    for line, row in s_rows:
        sid = row[c.id]
        if sid == "":
            raise DataFormatError("empty id", file=spath, row=line, column=c.id)
        if sid in survival:
            raise DataFormatError(
                f"duplicate survival row for id {sid!r} (first at row {survival[sid][0]})",
                file=spath, row=line, column=c.id,
            )
        T = _number(row[c.time], spath, line, c.time, nonneg=True)
        if T <= 0:
            raise DataFormatError("event time must be positive", file=spath, row=line, column=c.time)
        delta = _event(row[c.event], spath, line, c.event)
        w = tuple(_number(row[k], spath, line, k) for k in covariates)
        survival[sid] = (line, T, delta, w)

    measurements = {sid: [] for sid in survival}
    late = []
    for line, row in l_rows:
        sid = row[c.id]
        if sid not in survival:
            raise DataFormatError(f"id {sid!r} has no survival row", file=lpath, row=line, column=c.id)
        t = _number(row[c.time], lpath, line, c.time, nonneg=True)
        y = _number(row[c.response], lpath, line, c.response)
        if t > survival[sid][1]:
            if truncate:
                continue
            late.append(line)
            continue
        measurements[sid].append((t, y, line))
    if late:
        shown = ", ".join(str(k) for k in late[:10]) + (" ..." if len(late) > 10 else "")
        raise DataFormatError(
            f"{len(late)} measurement(s) after the subject's event/censoring time at rows {shown} "
            "(pass --truncate to drop them)",
            file=lpath, row=late[0], column=c.time,
        )

    subjects = []
    for sid, (line, T, delta, w) in survival.items():
        recs = sorted(measurements[sid])
        if not recs:
            raise DataFormatError(f"subject {sid!r} has no longitudinal measurements", file=spath, row=line)
        for (t0, _, _), (t1, _, l1) in zip(recs, recs[1:]):
            if t1 == t0:
                raise DataFormatError(f"repeated measurement time {t1!r} for id {sid!r}", file=lpath, row=l1,
                                      column=c.time)
        records = tuple(LongitudinalRecord(t, y) for t, y, _ in recs)
        try:
            subjects.append(SubjectData(sid, T, delta, w, records, basis))
        except InvalidInputError as exc:
            raise DataFormatError(str(exc), file=spath, row=line) from None
    return subjects


def write_bundle(data: Sequence[SubjectData], longitudinal_path, survival_path, covariate_names=None):
    """Write the CSV pair read by :func:`load_bundle`; floats use repr (exact round trip)."""
    data = list(data)
    q = len(data[0].baseline_covariates) if data else 0
    names = list(covariate_names) if covariate_names is not None else (["w"] if q == 1 else [f"w{k + 1}" for k in range(q)])
    if len(names) != q:
        raise InvalidInputError("covariate_names must match the number of baseline covariates")
    with open(survival_path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["id", "time", "event"] + names)
        for s in data:
            out.writerow([s.id, repr(float(s.event_time)), int(s.event_indicator)] + [repr(float(v)) for v in s.baseline_covariates])
    with open(longitudinal_path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["id", "time", "y"])
        for s in data:
            for rec in s.records:
                out.writerow([s.id, repr(float(rec.time)), repr(float(rec.response))])


def _clean(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def result_to_dict(result) -> dict:
    """JSON-ready dict with the stable output schema."""
    cohort = result.cohort
    params = result.params_hat
    names = parameter_names(params.beta.size, params.gamma.size, params.r)
    theta = dict(zip(names, (float(v) for v in params.to_vector())))
    if result.standard_errors is None:
        se = {k: None for k in names}
    else:
        se = {k: _clean(float(v)) for k, v in zip(names, result.standard_errors)}
    info = None if result.info_matrix is None else [[float(v) for v in row] for row in np.asarray(result.info_matrix)]
    return {
        "theta": theta,
        "standard_errors": se,
        "information_matrix": info,
        "hazard": result.hazard_hat.to_dict(),
        "loglik_trace": [float(v) for v in result.loglik_trace],
        "converged": bool(result.converged),
        "n_iters": int(result.n_iters),
    }


def write_result(path, result) -> dict:
    obj = result_to_dict(result)
    Path(path).write_text(json.dumps(obj, indent=2, allow_nan=False) + "\n", encoding="utf-8")
    return obj


def load_config(path) -> dict:
    """JSON config file whose keys mirror the long flag names (dashes or underscores)."""
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataFormatError(f"cannot open: {exc.strerror}", file=str(path)) from None
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"invalid JSON: {exc.msg}", file=str(path), row=exc.lineno) from None
    if not isinstance(obj, dict):
        raise DataFormatError("config must be a JSON object", file=str(path))
    return {k.replace("-", "_"): v for k, v in obj.items()}
