"""Reading user datasets and writing metric tables.

Missing outcome cells are the empty string, ``NA`` or ``NaN`` (any case).
Non-numeric covariates are treated as categorical and expanded into
indicator columns for every level but the first in sorted order, which is
recorded as the reference level.
"""

from __future__ import annotations

import csv
import io as _io
import json
import math
import re
import sys
from dataclasses import asdict, fields

import numpy as np

from .design import Dataset, DataError
from .simulation import ALL_METHODS, REGIMES, SCENARIOS, MetricsRow

NA_TOKENS = {"", "na", "nan"}
COLUMNS = [f.name for f in fields(MetricsRow)]


def _is_na(cell: str) -> bool:
    return cell.strip().lower() in NA_TOKENS


def _to_float(cell: str):
    try:
        return float(cell)
    except ValueError:
        return None


def _safe_name(s: str) -> str:
    out = re.sub(r"[^A-Za-z0-9_.]", "_", s.strip())
    return out if out and not out[0].isdigit() else "c_" + out


def load_dataset(path: str, outcome: str, response: str | None = None,
                 covariates=None) -> Dataset:
    """Read a delimited file with a header row into a :class:`Dataset`.

    ``response`` names a 0/1 column (1 = observed); ``None`` or ``"auto"``
    derives it from missing outcome cells.  Covariates default to every other
    column.
    """
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            sample = fh.read(4096)
            fh.seek(0)
            try:
                dialect = csv.Sniffer().sniff(sample, delimiters=",;\t")
            except csv.Error:
                dialect = csv.excel
            rows = list(csv.reader(fh, dialect))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise DataError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if any(c.strip() for c in r)]
    for i, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise DataError(f"line {i}: expected {len(header)} fields, found {len(r)}")
    col = {h: j for j, h in enumerate(header)}
    if outcome not in col:
        raise DataError(f"outcome column {outcome!r} not found")
    auto = response is None or response == "auto"
    if not auto and response not in col:
        raise DataError(f"response column {response!r} not found")
    if covariates is None:
        covariates = [h for h in header if h != outcome and (auto or h != response)]
    for c in covariates:
        if c not in col:
            raise DataError(f"covariate column {c!r} not found")
    n = len(body)
    y = np.full(n, np.nan)
    for i, r in enumerate(body):
        cell = r[col[outcome]]
        if _is_na(cell):
            continue
        v = _to_float(cell)
        if v is None:
            raise DataError(f"line {i + 2}: outcome {cell!r} is not numeric")
        y[i] = v
    if auto:
        rr = np.isfinite(y).astype(np.int8)
    else:
        rr = np.empty(n, np.int8)
        for i, r in enumerate(body):
            cell = r[col[response]].strip()
            if cell not in ("0", "1"):
                raise DataError(f"line {i + 2}: response indicator must be 0 or 1, got {cell!r}")
            rr[i] = int(cell)
            if rr[i] == 1 and not np.isfinite(y[i]):
                raise DataError(f"line {i + 2}: outcome marked observed but missing")
    cols, names, levels = [], [], {}
    for c in covariates:
        cells = [r[col[c]] for r in body]
        for i, cell in enumerate(cells):
            if _is_na(cell):
                raise DataError(f"line {i + 2}: covariate {c!r} is missing; covariates must be "
                                "fully observed")
        vals = [_to_float(cell) for cell in cells]
        if all(v is not None for v in vals):
            cols.append(np.array(vals, dtype=float))
            names.append(_safe_name(c))
            continue
        lv = sorted({cell.strip() for cell in cells})
        levels[_safe_name(c)] = {"reference": lv[0], "levels": lv}
        for level in lv[1:]:
            cols.append(np.array([cell.strip() == level for cell in cells], dtype=float))
            names.append(_safe_name(f"{c}_{level}"))
    x = np.column_stack(cols) if cols else np.empty((n, 0))
    return Dataset(y, rr, x, tuple(names), levels)


def write_dataset(path: str, data: Dataset, outcome: str = "y", response: str = "r"):
    """Write covariates, outcome (blank when missing) and response indicator."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*data.names, outcome, response])
        for i in range(data.n):
            yv = "" if data.r[i] == 0 else repr(float(data.y[i]))
            w.writerow([*(repr(float(v)) for v in data.x[i]), yv, int(data.r[i])])


# ---------------------------------------------------------------------------
# Result tables


def fmt_float(v: float) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "NA"
    s = f"{v:.6g}"
    return "0" if s == "-0" else s


def _order(row) -> tuple:
    def pos(seq, v):
        return seq.index(v) if v in seq else len(seq)

    return (pos(SCENARIOS, row.scenario), row.scenario, row.n, pos(REGIMES, row.regime),
            row.regime, pos(ALL_METHODS, row.method), row.method)


def _cells(row: MetricsRow) -> dict:
    out = {}
    for k, v in asdict(row).items():
        out[k] = fmt_float(v) if isinstance(v, float) else v
    return out


def render_results(rows, fmt: str = "csv") -> str:
    """Serialize metric rows with a fixed column order and sort order."""
    rows = sorted(rows, key=_order)
    if fmt == "csv":
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in rows:
            c = _cells(r)
            w.writerow([c[k] for k in COLUMNS])
        return buf.getvalue()
    if fmt == "json":
        recs = []
        for r in rows:
            rec = {}
            for k, v in asdict(r).items():
                if isinstance(v, float):
                    rec[k] = None if math.isnan(v) else float(fmt_float(v))
                else:
                    rec[k] = v
            recs.append(rec)
        return json.dumps({"columns": COLUMNS, "rows": recs}, indent=2) + "\n"
    if fmt == "text":
        return render_text(rows)
    raise ValueError(f"unknown format {fmt!r}")


def render_text(rows) -> str:
    """Aligned plain-text table, one block per (scenario, n, regime)."""
    rows = sorted(rows, key=_order)
    lines = []
    block = None
    for r in rows:
        key = (r.scenario, r.n, r.regime)
        if key != block:
            if lines:
                lines.append("")
            lines.append(f"{r.scenario}  n={r.n}  {r.regime}")
            lines.append(f"{'method':<12}{'bias':>10}{'rmse':>10}{'coverage':>10}{'ail':>10}"
                         f"{'reps':>6}{'fail':>6}")
            block = key
        lines.append(f"{r.method:<12}{fmt_float(r.bias):>10}{fmt_float(r.rmse):>10}"
                     f"{fmt_float(r.coverage):>10}{fmt_float(r.ail):>10}{r.replicates:>6}"
                     f"{r.failures:>6}")
    return "\n".join(lines) + "\n"


def emit_results(rows, fmt: str = "csv", path: str | None = None):
    """Write the table to ``path`` (stdout when ``None``)."""
    text = render_results(rows, fmt)
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write results to {path}: {exc}") from exc


def _parse_num(v):
    if v is None or v == "NA":
        return math.nan
    return float(v)


def load_results(path: str) -> list[MetricsRow]:
    """Read a CSV or JSON table previously written by :func:`emit_results`."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if text.lstrip().startswith("{"):
        try:
            recs = json.loads(text)["rows"]
        except (ValueError, KeyError) as exc:
            raise DataError(f"{path} is not a results JSON file") from exc
    else:
        reader = csv.DictReader(_io.StringIO(text))
        if reader.fieldnames != COLUMNS:
            raise DataError(f"{path} does not have the results columns {','.join(COLUMNS)}")
        recs = list(reader)
    out = []
    for rec in recs:
        try:
            out.append(MetricsRow(rec["scenario"], rec["regime"], rec["method"], int(rec["n"]),
                                  int(rec["replicates"]), _parse_num(rec["bias"]),
                                  _parse_num(rec["rmse"]), _parse_num(rec["coverage"]),
                                  _parse_num(rec["ail"]), int(rec["failures"])))
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"{path}: malformed results row {rec!r}") from exc
    return out
