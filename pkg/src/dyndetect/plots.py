"""Dependency-free SVG charts: dynamics curves and importance bars."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from dyndetect.dynamics import DynamicsTable
from dyndetect.errors import InvalidArgumentError

WIDTH, HEIGHT = 640, 400
MARGIN = 50
COLORS = {"clean": "#1f77b4", "mislabeled": "#d62728", "all": "#1f77b4"}


def _scale(v, lo, hi, out_lo, out_hi):
    if hi == lo:
        return (out_lo + out_hi) / 2.0 + 0.0 * np.asarray(v)
    return out_lo + (np.asarray(v, dtype=float) - lo) / (hi - lo) * (out_hi - out_lo)


def _frame(title, xlabel, ylabel, ylo, yhi):
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>',
        f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>',
        f'<text x="{WIDTH / 2}" y="{MARGIN / 2}" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<text x="{WIDTH / 2}" y="{HEIGHT - 12}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
        f'<text x="14" y="{HEIGHT / 2}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {HEIGHT / 2})">{escape(ylabel)}</text>',
        f'<text x="{MARGIN - 4}" y="{HEIGHT - MARGIN}" text-anchor="end" font-size="10">{ylo:.2g}</text>',
        f'<text x="{MARGIN - 4}" y="{MARGIN + 4}" text-anchor="end" font-size="10">{yhi:.2g}</text>',
    ]
    return parts


def dynamics_series(table: DynamicsTable) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per-epoch (mean, std) of the given-label probability, split by flag when flags exist."""
    if table.num_samples == 0:
        raise InvalidArgumentError("cannot plot an empty table")
    groups = {"all": np.ones(table.num_samples, dtype=bool)}
    if table.flags is not None:
        groups = {"clean": table.flags == 0, "mislabeled": table.flags == 1}
    out = {}
    for name, mask in groups.items():
        if mask.any():
            rows = table.values[mask]
            out[name] = (rows.mean(axis=0), rows.std(axis=0))
    return out


def emit_dynamics_plot(table: DynamicsTable, path, title: str = "Given-label probability per epoch") -> dict:
    """Mean +- std curves per group; returns the plotted series."""
    series = dynamics_series(table)
    t = np.arange(table.num_epochs)
    xs = _scale(t, 0, max(table.num_epochs - 1, 1), MARGIN, WIDTH - MARGIN)
    parts = _frame(title, "epoch", "probability of given label", 0.0, 1.0)
    for k, (name, (mean, std)) in enumerate(series.items()):
        color = COLORS[name]
        upper = _scale(np.clip(mean + std, 0, 1), 0, 1, HEIGHT - MARGIN, MARGIN)
        lower = _scale(np.clip(mean - std, 0, 1), 0, 1, HEIGHT - MARGIN, MARGIN)
        band = " ".join(f"{x:.1f},{y:.1f}" for x, y in zip(np.r_[xs, xs[::-1]], np.r_[upper, lower[::-1]]))
        parts.append(f'<polygon points="{band}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        ys = _scale(mean, 0, 1, HEIGHT - MARGIN, MARGIN)
        line = " ".join(f"{x:.1f},{y:.1f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="2"/>')
        parts.append(
            f'<text x="{WIDTH - MARGIN - 90}" y="{MARGIN + 16 * (k + 1)}" font-size="12" fill="{color}">{name}</text>'
        )
    parts.append("</svg>")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")
    return series


def bar_chart_svg(values, path, title: str = "", xlabel: str = "", ylabel: str = "") -> None:
    values = np.asarray(values, dtype=float)
    lo = min(0.0, float(values.min(initial=0.0)))
    hi = max(0.0, float(values.max(initial=0.0)))
    parts = _frame(title, xlabel, ylabel, lo, hi)
    n = max(values.size, 1)
    slot = (WIDTH - 2 * MARGIN) / n
    zero = float(_scale(0.0, lo, hi, HEIGHT - MARGIN, MARGIN))
    for i, v in enumerate(values):
        y = float(_scale(v, lo, hi, HEIGHT - MARGIN, MARGIN))
        top, h = min(y, zero), abs(zero - y)
        color = "#d62728" if v > 0 else "#1f77b4"
        parts.append(
            f'<rect x="{MARGIN + i * slot + 0.1 * slot:.1f}" y="{top:.1f}" width="{0.8 * slot:.1f}" height="{h:.1f}" fill="{color}"/>'
        )
    parts.append("</svg>")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")
