"""CSV and JSON-lines writers/readers for fields, error tables and scans."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

FLOAT_FMT = "%.17g"


def write_field_csv(ts, xs, values, path) -> None:
    """Header ``t,x,value``; rows ordered by time slice, then x."""
    ts, xs = np.asarray(ts, dtype=float), np.asarray(xs, dtype=float)
    values = np.asarray(values, dtype=float)
    tt, xx = np.meshgrid(ts, xs, indexing="ij")
    table = np.column_stack([tt.ravel(), xx.ravel(), values.ravel()])
    np.savetxt(path, table, fmt=FLOAT_FMT, delimiter=",", header="t,x,value", comments="")


def read_field_csv(path):
    """Return (ts, xs, values) from a file written by ``write_field_csv``."""
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    ts = np.unique(table[:, 0])
    xs = table[: len(table) // len(ts), 1]
    return ts, xs, table[:, 2].reshape(len(ts), len(xs))


def write_error_table(rows, path) -> None:
    """Header ``level,sup_err,mean_err``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "sup_err", "mean_err"])
        for r in rows:
            w.writerow([r.level, FLOAT_FMT % r.sup_err, FLOAT_FMT % r.mean_err])


def read_error_table(path):
    with open(path, newline="") as fh:
        return [(int(r["level"]), float(r["sup_err"]), float(r["mean_err"]))
                for r in csv.DictReader(fh)]


def write_ratio_scan_csv(scan, path) -> None:
    """Header ``parameter,ratio``."""
    table = np.column_stack([scan.parameters, scan.ratios])
    np.savetxt(path, table, fmt=FLOAT_FMT, delimiter=",", header="parameter,ratio", comments="")


def write_rows_csv(header, rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([FLOAT_FMT % c if isinstance(c, float) else c for c in row])


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
