"""Line charts written straight to SVG."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence, Tuple
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")
WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=64, right=150, top=36, bottom=48)


def _ticks(lo, hi, n=5):
    if hi == lo:
        return [lo]
    return list(np.linspace(lo, hi, n))


def _fmt(v):
    return f"{v:.3g}"


def line_chart(series: Sequence[Tuple[str, Sequence[float], Sequence[float]]], path, *, title="",
               xlabel="", ylabel="", band: Optional[Tuple[Sequence[float], Sequence[float], Sequence[float]]] = None,
               emphasize: Optional[str] = None):
    """Write ``(label, xs, ys)`` series as an SVG line chart.

    ``band`` is an optional ``(xs, lower, upper)`` shaded region. A series of
    one point is drawn as a single marker.
    """
    series = [(lab, list(map(float, xs)), list(map(float, ys))) for lab, xs, ys in series]
    if not series or not any(xs for _, xs, _ in series):
        raise ValueError("nothing to plot")
    all_x = [x for _, xs, _ in series for x in xs]
    all_y = [y for _, _, ys in series for y in ys if np.isfinite(y)]
    if band is not None:
        all_y += [float(v) for v in band[1]] + [float(v) for v in band[2]]
    x0, x1 = min(all_x), max(all_x)
    y0, y1 = (min(all_y), max(all_y)) if all_y else (0.0, 1.0)
    if x0 == x1:
        x0, x1 = x0 - 1, x1 + 1
    if y0 == y1:
        y0, y1 = y0 - 1, y1 + 1
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(x):
        return MARGIN["left"] + (x - x0) / (x1 - x0) * pw

    def py(y):
        return MARGIN["top"] + (1 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>']
    if title:
        out.append(f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>')
    l, t, b = MARGIN["left"], MARGIN["top"], MARGIN["top"] + ph
    out.append(f'<line x1="{l}" y1="{b}" x2="{l + pw}" y2="{b}" stroke="black"/>')
    out.append(f'<line x1="{l}" y1="{t}" x2="{l}" y2="{b}" stroke="black"/>')
    for xv in _ticks(x0, x1):
        out.append(f'<line x1="{px(xv):.1f}" y1="{b}" x2="{px(xv):.1f}" y2="{b + 4}" stroke="black"/>')
        out.append(f'<text x="{px(xv):.1f}" y="{b + 16}" text-anchor="middle">{_fmt(xv)}</text>')
    for yv in _ticks(y0, y1):
        out.append(f'<line x1="{l - 4}" y1="{py(yv):.1f}" x2="{l}" y2="{py(yv):.1f}" stroke="black"/>')
        out.append(f'<text x="{l - 6}" y="{py(yv) + 4:.1f}" text-anchor="end">{_fmt(yv)}</text>')
    out.append(f'<text x="{l + pw / 2}" y="{HEIGHT - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{t + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 14 {t + ph / 2})">{escape(ylabel)}</text>')
    if band is not None:
        bx, lo, hi = band
        pts = [(px(x), py(v)) for x, v in zip(bx, hi)] + [(px(x), py(v)) for x, v in reversed(list(zip(bx, lo)))]
        out.append('<polygon fill="#999999" fill-opacity="0.25" stroke="none" points="'
                   + " ".join(f"{a:.1f},{c:.1f}" for a, c in pts) + '"/>')
    for i, (label, xs, ys) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        width = 2.5 if label == emphasize else 1.2
        pts = [(px(x), py(y)) for x, y in zip(xs, ys) if np.isfinite(y)]
        if len(pts) == 1:
            out.append(f'<circle cx="{pts[0][0]:.1f}" cy="{pts[0][1]:.1f}" r="3.5" fill="{color}"/>')
        elif pts:
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="{width}" points="'
                       + " ".join(f"{a:.1f},{c:.1f}" for a, c in pts) + '"/>')
        ly = t + 14 + 16 * i
        out.append(f'<line x1="{l + pw + 12}" y1="{ly - 4}" x2="{l + pw + 30}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{l + pw + 34}" y="{ly}" class="series">{escape(label)}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")
    return Path(path)
