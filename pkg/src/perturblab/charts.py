"""Minimal SVG line charts, no plotting dependency.

One polyline per series over categorical x positions, a highlighted zero
baseline, per-series markers, and a legend. Output is plain SVG 1.1 text
that any XML parser accepts.
"""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

_COLORS = ["#d4a017", "#c0392b", "#2980b9", "#27ae60", "#8e44ad",
           "#16a085", "#e67e22", "#34495e", "#7f8c8d"]
_MARKERS = ["cross", "plus", "square", "circle", "triangle", "diamond",
            "pentagon", "star", "hexagon"]


def _marker(shape: str, x: float, y: float, color: str, r: float = 3.4) -> str:
    if shape == "circle":
        return f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{r:.1f}" fill="{color}"/>'
    if shape == "square":
        return (f'<rect x="{x - r:.2f}" y="{y - r:.2f}" width="{2 * r:.1f}" '
                f'height="{2 * r:.1f}" fill="{color}"/>')
    if shape == "cross":
        return (f'<path d="M{x - r:.2f} {y - r:.2f} L{x + r:.2f} {y + r:.2f} '
                f'M{x - r:.2f} {y + r:.2f} L{x + r:.2f} {y - r:.2f}" '
                f'stroke="{color}" stroke-width="1.6" fill="none"/>')
    if shape == "plus":
        return (f'<path d="M{x - r:.2f} {y:.2f} L{x + r:.2f} {y:.2f} '
                f'M{x:.2f} {y - r:.2f} L{x:.2f} {y + r:.2f}" '
                f'stroke="{color}" stroke-width="1.6" fill="none"/>')
    # regular polygon fallback for the remaining shapes
    sides = {"triangle": 3, "diamond": 4, "pentagon": 5, "star": 5,
             "hexagon": 6}.get(shape, 3)
    pts = []
    for i in range(sides):
        ang = -math.pi / 2 + 2 * math.pi * i / sides
        pts.append(f"{x + r * math.cos(ang):.2f},{y + r * math.sin(ang):.2f}")
    return f'<polygon points="{" ".join(pts)}" fill="{color}"/>'


def line_chart(x_labels, series: dict, title: str = "", y_label: str = "",
               width: int = 640, height: int = 360) -> str:
    """Render named series over categorical x labels as an SVG string.

    ``series`` maps name -> list of values aligned with ``x_labels``; None
    entries leave gaps.
    """
    if not x_labels:
        raise ValueError("need at least one x label")
    ml, mr, mt, mb = 64, 160, 36, 56
    pw, ph = width - ml - mr, height - mt - mb
    values = [v for vs in series.values() for v in vs if v is not None
              and math.isfinite(v)]
    lo = min(values + [0.0]) if values else -1.0
    hi = max(values + [0.0]) if values else 1.0
    if hi - lo < 1e-9:
        hi, lo = hi + 0.5, lo - 0.5
    pad = 0.08 * (hi - lo)
    lo, hi = lo - pad, hi + pad

    def sx(i):
        if len(x_labels) == 1:
            return ml + pw / 2
        return ml + pw * i / (len(x_labels) - 1)

    def sy(v):
        return mt + ph * (1 - (v - lo) / (hi - lo))

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{ml}" y="20" font-size="14" font-family="sans-serif">'
        f'{escape(title)}</text>',
    ]
    # axes
    parts.append(f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" '
                 'stroke="#444" stroke-width="1"/>')
    parts.append(f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" '
                 'stroke="#444" stroke-width="1"/>')
    # y ticks
    for t in range(5):
        v = lo + (hi - lo) * t / 4
        y = sy(v)
        parts.append(f'<line x1="{ml - 4}" y1="{y:.2f}" x2="{ml}" y2="{y:.2f}" '
                     'stroke="#444"/>')
        parts.append(f'<text x="{ml - 8}" y="{y + 4:.2f}" font-size="10" '
                     f'text-anchor="end" font-family="sans-serif">{v:.3f}</text>')
    if y_label:
        parts.append(f'<text x="14" y="{mt + ph / 2:.2f}" font-size="11" '
                     f'font-family="sans-serif" transform="rotate(-90 14 '
                     f'{mt + ph / 2:.2f})" text-anchor="middle">'
                     f'{escape(y_label)}</text>')
    # zero baseline
    if lo < 0 < hi:
        y0 = sy(0.0)
        parts.append(f'<line x1="{ml}" y1="{y0:.2f}" x2="{ml + pw}" '
                     f'y2="{y0:.2f}" stroke="black" stroke-width="1.2" '
                     'stroke-dasharray="5,3"/>')
    # x labels
    for i, lab in enumerate(x_labels):
        x = sx(i)
        parts.append(f'<text x="{x:.2f}" y="{mt + ph + 14:.2f}" font-size="9" '
                     f'font-family="sans-serif" text-anchor="end" '
                     f'transform="rotate(-30 {x:.2f} {mt + ph + 14:.2f})">'
                     f'{escape(str(lab))}</text>')
    # series
    for si, (name, vals) in enumerate(series.items()):
        color = _COLORS[si % len(_COLORS)]
        shape = _MARKERS[si % len(_MARKERS)]
        pts = [(sx(i), sy(v)) for i, v in enumerate(vals)
               if v is not None and math.isfinite(v)]
        if len(pts) > 1:
            path = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
            parts.append(f'<polyline points="{path}" fill="none" '
                         f'stroke="{color}" stroke-width="1.6"/>')
        for x, y in pts:
            parts.append(_marker(shape, x, y, color))
        lx, ly = width - mr + 14, mt + 16 + 18 * si
        parts.append(_marker(shape, lx, ly - 3, color))
        parts.append(f'<text x="{lx + 10}" y="{ly}" font-size="10" '
                     f'font-family="sans-serif">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts)
