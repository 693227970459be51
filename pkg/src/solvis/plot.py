"""Minimal SVG line chart for feature trends over a dissolution series."""
from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def _scale(values, lo_px, hi_px):
    finite = [v for v in values if v is not None and math.isfinite(v)]
    lo, hi = (min(finite), max(finite)) if finite else (0.0, 1.0)
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi, lambda v: lo_px + (v - lo) / (hi - lo) * (hi_px - lo_px)


def trend_svg(x, series: dict[str, list], title: str = "", x_label: str = "minutes",
              width: int = 640, height: int = 360) -> str:
    """Each series is drawn on its own vertical scale, labelled with its range."""
    left, right, top, bottom = 60, 20, 40, 50
    _, _, sx = _scale(list(x), left, width - right)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
             f'<line x1="{left}" y1="{height - bottom}" x2="{width - right}" y2="{height - bottom}" stroke="black"/>',
             f'<line x1="{left}" y1="{top}" x2="{left}" y2="{height - bottom}" stroke="black"/>',
             f'<text x="{(left + width - right) / 2}" y="{height - 15}" text-anchor="middle">{escape(x_label)}</text>']
    xs = list(x)
    if xs:
        for v in (xs[0], xs[-1]):
            parts.append(f'<text x="{sx(v):.1f}" y="{height - bottom + 16}" text-anchor="middle">{v:g}</text>')
    for i, (name, ys) in enumerate(series.items()):
        color = COLORS[i % len(COLORS)]
        lo, hi, sy = _scale(ys, height - bottom, top)
        points = " ".join(f"{sx(a):.1f},{sy(b):.1f}" for a, b in zip(xs, ys)
                          if b is not None and math.isfinite(b))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{points}"/>')
        parts.append(f'<text x="{left + 10}" y="{top + 14 * (i + 1)}" fill="{color}">'
                     f'{escape(name)} [{lo:.4g} .. {hi:.4g}]</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_trend_svg(path: str | Path, x, series: dict[str, list], title: str = "") -> None:
    Path(path).write_text(trend_svg(x, series, title))
