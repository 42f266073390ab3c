"""Deterministic table and figure writers."""

from __future__ import annotations

import math
import os
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CANVAS_PX = 800
DPI = 100


def format_value(v) -> str:
    """Render a cell: floats with 17 significant digits, bools as 0/1."""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return format(v, ".17g")
    if v is None:
        return ""
    s = str(v)
    if any(ch in s for ch in ",\n\""):
        s = '"' + s.replace('"', '""') + '"'
    return s


def write_table(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    """Comma-separated table with a one-line header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    for r in rows:
        if len(r) != len(header):
            raise ValueError(f"row has {len(r)} cells, header has {len(header)}")
        lines.append(",".join(format_value(v) for v in r))
    path.write_text("\n".join(lines) + "\n")
    return path


def write_dict_rows(path, rows: Sequence[dict]) -> Path:
    header = list(rows[0].keys()) if rows else []
    return write_table(path, header, [[r[k] for k in header] for r in rows])


def read_table(path) -> tuple[list[str], list[list[str]]]:
    import csv

    with open(path, newline="") as fh:
        data = list(csv.reader(fh))
    return data[0], data[1:]


def echo_config(text: str, out_dir) -> Path:
    """Copy the configuration text byte for byte into ``out_dir``."""
    p = Path(out_dir) / "config.ini"
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", newline="") as fh:
        fh.write(text)
    return p


# ---------------------------------------------------------------------------
# figures


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "inertial-coalescence"
    matplotlib.rcParams["svg.fonttype"] = "path"
    return plt


def _pi_ticks(ax, L1: float, L2: float) -> None:
    labels = {0: "0", 1: "π/2", 2: "π", 3: "3π/2", 4: "2π"}
    for L, setter, lab in ((L1, ax.set_xticks, ax.set_xticklabels),
                           (L2, ax.set_yticks, ax.set_yticklabels)):
        if abs(L - 2 * math.pi) < 1e-12:
            setter([k * math.pi / 2 for k in range(5)])
            lab([labels[k] for k in range(5)])


def contour_figure(path, X1, X2, Z, title: str, levels: int | Sequence[float] = 12,
                   shade_above: float | None = None, overlay=None, periods=(2 * math.pi,) * 2,
                   timestamp: bool = False) -> Path:
    """Filled contour plot on an 800x800 canvas with a discrete viridis palette.

    ``shade_above`` greys out ``{Z >= value}`` and draws the zero contour of
    ``Z`` in red; ``overlay`` is an optional second field drawn as black
    level lines.
    """
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(CANVAS_PX / DPI, CANVAS_PX / DPI), dpi=DPI)
    cs = ax.contourf(X1, X2, Z, levels=levels, cmap="viridis")
    fig.colorbar(cs, ax=ax, shrink=0.8)
    if shade_above is not None:
        ax.contourf(X1, X2, Z, levels=[shade_above, np.inf], colors=["0.6"], alpha=0.8)
        ax.contour(X1, X2, Z, levels=[0.0], colors="red", linewidths=1.5)
    if overlay is not None:
        ax.contour(X1, X2, overlay, levels=12, colors="black", linewidths=0.6)
    ax.set_aspect("equal")
    ax.set_xlabel("x1")
    ax.set_ylabel("x2")
    ax.set_title(title)
    _pi_ticks(ax, *periods)
    return _save(fig, path, timestamp)


def line_figure(path, series: dict, title: str, logy: bool = False, xlabel: str = "t",
                ylabel: str = "", timestamp: bool = False) -> Path:
    """Overlay of named ``(x, y, lo, hi)`` curves; ``lo``/``hi`` may be None."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(CANVAS_PX / DPI, CANVAS_PX / DPI), dpi=DPI)
    for name, (x, y, lo, hi) in series.items():
        ax.plot(x, y, label=name)
        if lo is not None and hi is not None:
            ax.fill_between(x, lo, hi, alpha=0.25)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend()
    return _save(fig, path, timestamp)


def _save(fig, path, timestamp: bool) -> Path:
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {} if timestamp else {"Date": None}
    fig.savefig(path, format="svg", metadata=meta)
    plt.close(fig)
    return path


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
