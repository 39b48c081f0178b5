"""Line charts from result CSVs, rendered to self-contained SVG."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


class PlotError(ValueError):
    pass


def read_rows(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def line_chart(csv_paths, x: str, ys, out, group: str | None = None,
               logy: bool = False, title: str | None = None) -> Path:
    """Plot columns ``ys`` against ``x`` for every CSV (and every ``group`` value).

    Raises :class:`PlotError` before anything is written if a file has no data
    rows or lacks a requested column.
    """
    ys = [ys] if isinstance(ys, str) else list(ys)
    series = []
    for path in csv_paths:
        rows = read_rows(path)
        if not rows:
            raise PlotError(f"{path}: no data rows")
        need = [x, *ys] + ([group] if group else [])
        missing = [c for c in need if c not in rows[0]]
        if missing:
            raise PlotError(f"{path}: missing column(s) {', '.join(missing)}")
        keys = sorted({r[group] for r in rows}) if group else [None]
        for key in keys:
            sel = [r for r in rows if group is None or r[group] == key]
            for y in ys:
                label = " ".join(str(s) for s in (Path(path).stem if len(csv_paths) > 1 else None, key, y) if s)
                series.append((label, [float(r[x]) for r in sel], [float(r[y]) for r in sel]))

    fig, ax = plt.subplots(figsize=(6, 4))
    for label, xs, vals in series:
        ax.plot(xs, vals, marker="o", label=label)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(x)
    ax.set_ylabel(ys[0] if len(ys) == 1 else "value")
    if title:
        ax.set_title(title)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize="small")
    fig.tight_layout()
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    # fixed id salt and no date, so identical data gives identical files
    with plt.rc_context({"svg.hashsalt": "jcasnet"}):
        fig.savefig(out, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out
