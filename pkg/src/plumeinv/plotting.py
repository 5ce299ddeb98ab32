"""Deterministic SVG line plots with CSV twins."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io import atomic_write  # noqa: E402

_RC = {
    "svg.hashsalt": "plumeinv",
    "svg.fonttype": "none",
    "path.simplify": False,
}


def _csv_text(x, series: Mapping[str, np.ndarray], header_note: str | None) -> str:
    buf = io.StringIO()
    if header_note:
        buf.write(f"# {header_note}\n")
    w = csv.writer(buf, lineterminator="\n")
    names = list(series)
    w.writerow(["x", *names])
    for k, xv in enumerate(x):
        w.writerow([repr(float(xv)), *(repr(float(series[n][k])) for n in names)])
    return buf.getvalue()


def emit_plot(
    series: Mapping[str, Sequence[float]],
    path,
    *,
    x: Sequence[float] | None = None,
    truth: Sequence[float] | None = None,
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    note: str | None = None,
) -> tuple[Path, Path]:
    """Render named series as polylines to ``path`` (SVG) and ``path`` with ``.csv``.

    With ``truth`` the plot is drawn in posterior mode: every series is a thin
    sample curve and the truth curve is drawn last, on top. ``note`` (for
    example a config hash) is written as a comment line heading the CSV.
    """
    if not series:
        raise ValueError("need at least one series")
    data = {k: np.asarray(v, float).ravel() for k, v in series.items()}
    n = len(next(iter(data.values())))
    if any(len(v) != n for v in data.values()):
        raise ValueError("all series must have the same length")
    xs = np.arange(n, dtype=float) if x is None else np.asarray(x, float)
    path = Path(path)
    table = dict(data)
    if truth is not None:
        table["truth"] = np.asarray(truth, float).ravel()

    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6.4, 4.0))
        for k, (name, ys) in enumerate(data.items()):
            if truth is not None:
                ax.plot(xs, ys, color="tab:blue", lw=0.6, alpha=0.35, gid=f"sample{k}")
            else:
                ax.plot(xs, ys, lw=1.4, label=name, gid=f"series{k}")
        if truth is not None:
            ax.plot(xs, table["truth"], color="k", lw=2.0, label="truth", gid="truth", zorder=10)
        ax.set_title(title)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if truth is not None or len(data) > 1:
            ax.legend(loc="best", fontsize="small")
        buf = io.BytesIO()
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)
    atomic_write(path, buf.getvalue())
    csv_path = path.with_suffix(".csv")
    atomic_write(csv_path, _csv_text(xs, table, note).encode())
    return path, csv_path


def emit_bars(
    labels: Sequence[str],
    values: Sequence[float],
    path,
    *,
    low: Sequence[float] | None = None,
    high: Sequence[float] | None = None,
    title: str = "",
    ylabel: str = "",
    log: bool = False,
    note: str | None = None,
) -> tuple[Path, Path]:
    """Bar chart with optional min/max error bars, plus a CSV twin."""
    vals = np.asarray(values, float)
    if vals.size == 0:
        raise ValueError("need at least one bar")
    path = Path(path)
    err = None
    if low is not None and high is not None:
        err = np.vstack([vals - np.asarray(low, float), np.asarray(high, float) - vals])
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6.4, 4.0))
        ax.bar(np.arange(vals.size), vals, yerr=err, capsize=4, color="tab:gray")
        ax.set_xticks(np.arange(vals.size), [str(s) for s in labels])
        if log:
            ax.set_yscale("log")
        ax.set_title(title)
        ax.set_ylabel(ylabel)
        buf = io.BytesIO()
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)
    atomic_write(path, buf.getvalue())
    out = io.StringIO()
    if note:
        out.write(f"# {note}\n")
    w = csv.writer(out, lineterminator="\n")
    cols = ["label", "value"] + (["low", "high"] if err is not None else [])
    w.writerow(cols)
    for k, lab in enumerate(labels):
        row = [lab, repr(float(vals[k]))]
        if err is not None:
            row += [repr(float(low[k])), repr(float(high[k]))]
        w.writerow(row)
    csv_path = path.with_suffix(".csv")
    atomic_write(csv_path, out.getvalue().encode())
    return path, csv_path
