"""Standalone SVG line plots of node series with flagged steps marked."""

from __future__ import annotations

import csv
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#2ca02c", "#9467bd", "#8c564b", "#17becf", "#7f7f7f", "#bcbd22", "#e377c2")
FLAG_COLOUR = "#d62728"


def choose_nodes(report_nodes: dict, n_nodes: int, count: int = 4) -> list[int]:
    """Most frequently localised nodes, padded with the lowest indices."""
    hits: dict[int, int] = {}
    for entries in report_nodes.values():
        for node, _, _ in entries:
            hits[node] = hits.get(node, 0) + 1
    ranked = sorted(hits, key=lambda v: (-hits[v], v))[:count]
    for v in range(n_nodes):
        if len(ranked) >= count:
            break
        if v not in ranked:
            ranked.append(v)
    return sorted(ranked)


def render_svg(t: np.ndarray, series: np.ndarray, labels: list[str], flags: np.ndarray,
               width: int = 800, row_height: int = 120, margin: int = 40) -> str:
    """One panel per row of ``series`` (shape ``(m, T)``), red dots where ``flags``."""
    t = np.asarray(t, dtype=np.float64)
    series = np.atleast_2d(np.asarray(series, dtype=np.float64))
    flags = np.asarray(flags, dtype=bool)
    m, T = series.shape
    if len(t) != T or len(flags) != T or len(labels) != m:
        raise ValueError("time axis, flags and labels must match the series")
    height = m * row_height + 2 * margin
    plot_w = width - 2 * margin
    span = max(t[-1] - t[0], 1.0)
    xs = margin + (t - t[0]) / span * plot_w
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for r in range(m):
        y_top = margin + r * row_height
        y = series[r]
        lo, hi = float(y.min()), float(y.max())
        scale = (row_height - 20) / (hi - lo if hi > lo else 1.0)
        ys = y_top + row_height - 10 - (y - lo) * scale
        colour = PALETTE[r % len(PALETTE)]
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(xs, ys))
        out.append(f'<text x="4" y="{y_top + 14}" font-size="11">{escape(labels[r])}</text>')
        out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1" points="{pts}"/>')
        for i in np.nonzero(flags)[0]:
            out.append(f'<circle cx="{xs[i]:.2f}" cy="{ys[i]:.2f}" r="2.5" fill="{FLAG_COLOUR}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_plot(path_svg, path_csv, t, series, labels, flags) -> None:
    """SVG plus the CSV behind it (one column per panel and a flag column)."""
    with open(path_svg, "w") as fh:
        fh.write(render_svg(t, series, labels, flags))
    with open(path_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", *labels, "flagged"])
        for i, ti in enumerate(t):
            w.writerow([int(ti), *(repr(float(s[i])) for s in series), int(flags[i])])
