"""Static SVG line charts from trace CSV files (read-only consumption)."""

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .trace_io import column, read_table  # noqa: E402

DEFAULT_PANELS = ("loss", "lambda1_at_x", "alignment", "stableness")


class MissingColumnError(KeyError):
    pass


def plot_csv(csv_path, out_path=None, panels=DEFAULT_PANELS, x_column=None, log_loss=True):
    """One panel per column against ``step`` (or ``tau`` for flow files); returns the SVG path.

    Raises ``MissingColumnError`` if a requested panel or the x column is absent.
    Rows with empty cells are skipped per panel.
    """
    csv_path = Path(csv_path)
    columns, rows = read_table(csv_path)
    if x_column is None:
        x_column = "step" if "step" in columns else "tau"
    missing = [c for c in (x_column, *panels) if c not in columns]
    if missing:
        raise MissingColumnError(f"{csv_path.name}: missing column(s) {', '.join(missing)}")
    xs = column(rows, columns, x_column)

    plt.rcParams["svg.hashsalt"] = "eoslab"
    n = len(panels)
    ncols = 2 if n > 1 else 1
    nrows = math.ceil(n / ncols)
    fig, axes = plt.subplots(nrows, ncols, figsize=(5 * ncols, 3.2 * nrows), squeeze=False)
    for ax, name in zip(axes.flat, panels):
        ys = column(rows, columns, name)
        pts = [(x, y) for x, y in zip(xs, ys) if not (math.isnan(y) or math.isnan(x))]
        if pts:
            px, py = zip(*pts)
            ax.plot(px, py, lw=0.8)
            if name == "loss" and log_loss and min(py) > 0:
                ax.set_yscale("log")
        ax.set_xlabel(x_column)
        ax.set_ylabel(name)
        ax.grid(alpha=0.3)
    for ax in list(axes.flat)[n:]:
        ax.set_visible(False)
    fig.tight_layout()
    out_path = Path(out_path) if out_path else csv_path.with_suffix(".svg")
    fig.savefig(out_path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out_path
