"""CSV persistence for optimizer traces, flow traces and comparison reports.

Floats are written with ``repr`` (shortest round-trip form), so identical
runs produce byte-identical files. Cells that were not computed for a row
are left empty rather than zero-filled.
"""

import csv
import math
from pathlib import Path

TRACE_BASE = ["step", "loss", "sqrt_loss", "grad_norm", "eta_effective", "lambda1_at_x",
              "lambda1_at_phi", "alignment", "theta", "G", "tilde_norm"]
TRACE_TAIL = ["stableness", "stableness_lb", "noise_applied", "event"]


def trace_columns(n_r):
    return TRACE_BASE + [f"R_{j}" for j in range(1, n_r + 1)] + TRACE_TAIL


def fmt(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, int):
        return str(value)
    value = float(value)
    if math.isnan(value):
        return "nan"
    return repr(value)


def trace_row(rec, n_r):
    row = {"step": rec.step, "loss": rec.loss, "sqrt_loss": rec.sqrt_loss, "grad_norm": rec.grad_norm,
           "eta_effective": rec.eta_effective, "noise_applied": bool(rec.noise_applied),
           "event": rec.event}
    d = rec.diagnostics
    if d is not None:
        row["lambda1_at_x"] = d.lambda1_at_x
        row["lambda1_at_phi"] = d.lambda1_at_phi
        row["stableness"] = d.stableness
        row["stableness_lb"] = d.stableness_lb
        obs = d.observables
        if obs is not None:
            row.update(alignment=obs.alignment, theta=obs.theta, G=obs.G, tilde_norm=obs.tilde_norm)
            for j, r in enumerate(obs.R[:n_r], start=1):
                row[f"R_{j}"] = r
    return [row.get(c) if c == "event" else fmt(row.get(c)) for c in trace_columns(n_r)]


class TraceWriter:
    """Streams trace records to CSV. Rows are written one record late so the
    terminal event (set in place on the last record) lands in the file."""

    def __init__(self, path, n_r):
        self.path = Path(path)
        self.n_r = n_r
        self._fh = open(self.path, "w", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(trace_columns(n_r))
        self._pending = None
        self.rows = 0

    def __call__(self, rec):
        if self._pending is not None:
            self._write(self._pending)
        self._pending = rec

    def _write(self, rec):
        self._w.writerow(trace_row(rec, self.n_r))
        self.rows += 1

    def close(self):
        if self._pending is not None:
            self._write(self._pending)
            self._pending = None
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_trace(path, trace, n_r):
    with TraceWriter(path, n_r) as w:
        for rec in trace:
            w(rec)
    return Path(path)


def write_table(path, columns, rows):
    """Generic CSV table with the same float formatting."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in row])
    return Path(path)


def write_flow(path, flow_trace):
    dim = flow_trace[0].x.shape[0] if flow_trace else 0
    cols = ["tau", "lambda1", "residual_grad_norm"] + [f"x_{i}" for i in range(dim)] + ["warnings"]
    rows = [[s.tau, s.lambda1, s.residual_grad_norm, *map(float, s.x), ";".join(s.warnings)]
            for s in flow_trace]
    return write_table(path, cols, rows)


def write_comparison(path, report):
    cols = ["tau", "step", "distance", "relative", "valid"]
    rows = [[float(t), int(s), float(d), float(r), bool(v)]
            for t, s, d, r, v in zip(report.taus, report.steps, report.distances, report.relative,
                                     report.valid)]
    return write_table(path, cols, rows)


def read_table(path):
    """``(columns, rows)`` with cells as strings."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            columns = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty CSV file") from None
        return columns, list(reader)


def column(rows, columns, name):
    """Float values of one column; empty cells become NaN."""
    if name not in columns:
        raise KeyError(name)
    i = columns.index(name)
    return [float(r[i]) if r[i] not in ("",) else math.nan for r in rows]
