"""Run artifacts: a flat CSV metrics log and matplotlib renderings of it.

The log is append-only with a fixed header; every value is written with
repr-stable formatting so a finished run can be re-read loss-free. Plots
are rendered without any global pyplot state at a fixed size and dpi, so
the same log produces the same image bytes.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

from matplotlib.figure import Figure


class PlotsError(ValueError):
    """Raised for malformed metric logs."""


class MetricsLog:
    """Append-only CSV with a declared column set."""

    def __init__(self, path, fieldnames: list[str]):
        self.path = Path(path)
        self.fieldnames = list(fieldnames)
        if len(set(self.fieldnames)) != len(self.fieldnames):
            raise PlotsError("duplicate column names")
        if not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.fieldnames)

    def append(self, row: dict) -> None:
        unknown = set(row) - set(self.fieldnames)
        if unknown:
            raise PlotsError(f"unknown columns: {sorted(unknown)}")
        values = []
        for name in self.fieldnames:
            v = row.get(name, "")
            if isinstance(v, float):
                values.append(repr(v))
            else:
                values.append(v)
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(values)


def read_metrics_csv(path) -> list[dict]:
    """Rows as dicts; numeric-looking fields become floats, blanks None."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {}
            for k, v in row.items():
                if v is None or v == "":
                    parsed[k] = None
                    continue
                try:
                    parsed[k] = float(v)
                except ValueError:
                    parsed[k] = v
            out.append(parsed)
    return out


def _x_column(rows: list[dict]) -> str | None:
    for name in ("step", "iteration"):
        if name in rows[0]:
            return name
    return None


def _numeric_series(rows: list[dict], column: str, x_column: str | None):
    xs, ys = [], []
    for i, row in enumerate(rows):
        v = row.get(column)
        if isinstance(v, float) and not math.isnan(v):
            x = row.get(x_column) if x_column else None
            xs.append(x if isinstance(x, float) else float(i))
            ys.append(v)
    return xs, ys


def plot_training_curves(csv_path, out_png, columns: list[str] | None = None) -> None:
    """Line plot of the requested (default: all) numeric columns vs step."""
    rows = read_metrics_csv(csv_path)
    if not rows:
        raise PlotsError(f"empty metrics log: {csv_path}")
    x_column = _x_column(rows)
    if columns is None:
        columns = [c for c in rows[0] if c != x_column]
    fig = Figure(figsize=(8.0, 5.0), dpi=120)
    ax = fig.add_subplot(111)
    plotted = 0
    for col in columns:
        xs, ys = _numeric_series(rows, col, x_column)
        if xs:
            ax.plot(xs, ys, label=col, linewidth=1.2)
            plotted += 1
    if plotted == 0:
        raise PlotsError("no numeric columns to plot")
    ax.set_xlabel(x_column or "row")
    ax.set_ylabel("value")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    Path(out_png).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_png, format="png")


def plot_class_ap(per_class_ap: dict[int, float], out_png,
                  base_ids=(), novel_ids=()) -> None:
    """Bar chart of per-class AP, novel classes drawn hatched."""
    if not per_class_ap:
        raise PlotsError("no per-class results to plot")
    fig = Figure(figsize=(8.0, 4.0), dpi=120)
    ax = fig.add_subplot(111)
    cids = sorted(per_class_ap)
    novel = set(novel_ids)
    for i, cid in enumerate(cids):
        v = per_class_ap[cid]
        if math.isnan(v):
            v = 0.0
        ax.bar(i, v, color="#4878a8" if cid not in novel else "#a85448",
               hatch="//" if cid in novel else None)
    ax.set_xticks(range(len(cids)))
    ax.set_xticklabels([str(c) for c in cids])
    ax.set_xlabel("class id")
    ax.set_ylabel("AP")
    ax.set_ylim(0.0, 1.0)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    Path(out_png).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_png, format="png")
