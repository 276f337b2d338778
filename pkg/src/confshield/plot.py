"""Minimal self-contained SVG line chart of mean inefficiency against PSR."""

from __future__ import annotations

import math
from typing import Sequence

from .shield import SweepRow

WIDTH, HEIGHT = 640, 420
MARGIN = dict(left=70, right=130, top=30, bottom=60)
COLORS = {"fgsm": "#1f77b4", "pgd": "#d62728", "cw": "#2ca02c"}
X_RANGE = (-20.0, 0.0)


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    step = (hi - lo) / n
    return [lo + i * step for i in range(n + 1)]


def inefficiency_svg(rows: Sequence[SweepRow], x_range: tuple[float, float] = X_RANGE) -> str:
    """One polyline per attack method; clean inefficiency as a dashed reference."""
    attacked = [r for r in rows if r.method != "clean"]
    clean = [r for r in rows if r.method == "clean"]
    ys = [r.mean_inefficiency for r in rows if not math.isnan(r.mean_inefficiency)]
    y_lo = 0.0
    y_hi = max(ys + [1.0]) * 1.1
    x_lo, x_hi = x_range
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def sx(x: float) -> float:
        return MARGIN["left"] + (x - x_lo) / (x_hi - x_lo) * pw

    def sy(y: float) -> float:
        return MARGIN["top"] + (1.0 - (y - y_lo) / (y_hi - y_lo)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" data-x-min="{x_lo:g}" data-x-max="{x_hi:g}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<g font-family="sans-serif" font-size="12">',
        f'<line x1="{sx(x_lo):.2f}" y1="{sy(y_lo):.2f}" x2="{sx(x_hi):.2f}" y2="{sy(y_lo):.2f}" stroke="black"/>',
        f'<line x1="{sx(x_lo):.2f}" y1="{sy(y_lo):.2f}" x2="{sx(x_lo):.2f}" y2="{sy(y_hi):.2f}" stroke="black"/>',
    ]
    for x in _ticks(x_lo, x_hi, 5):
        out.append(f'<text x="{sx(x):.2f}" y="{sy(y_lo) + 18:.2f}" text-anchor="middle">{x:g}</text>')
    for y in _ticks(y_lo, y_hi, 5):
        out.append(f'<text x="{sx(x_lo) - 8:.2f}" y="{sy(y) + 4:.2f}" text-anchor="end">{y:.2f}</text>')
    out.append(f'<text x="{sx((x_lo + x_hi) / 2):.2f}" y="{HEIGHT - 15}" text-anchor="middle">PSR (dB)</text>')
    out.append(f'<text x="18" y="{sy((y_lo + y_hi) / 2):.2f}" text-anchor="middle" '
               f'transform="rotate(-90 18 {sy((y_lo + y_hi) / 2):.2f})">mean set size</text>')

    if clean:
        yc = sy(clean[0].mean_inefficiency)
        out.append(f'<line class="clean" x1="{sx(x_lo):.2f}" y1="{yc:.2f}" x2="{sx(x_hi):.2f}" '
                   f'y2="{yc:.2f}" stroke="gray" stroke-dasharray="5,4"/>')

    methods = []
    for r in attacked:
        if r.method not in methods:
            methods.append(r.method)
    for i, m in enumerate(methods):
        pts = sorted((r.psr_db, r.mean_inefficiency) for r in attacked if r.method == m)
        color = COLORS.get(m, "black")
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
        out.append(f'<polyline class="series" data-method="{m}" points="{coords}" '
                   f'fill="none" stroke="{color}" stroke-width="2"/>')
        ly = MARGIN["top"] + 20 * i + 10
        lx = WIDTH - MARGIN["right"] + 15
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 26}" y="{ly + 4}">{m.upper()}</text>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
