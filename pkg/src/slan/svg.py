"""Dependency-free SVG line charts for experiment reports.

Output is a plain-text SVG built with fixed formatting, so identical inputs
produce byte-identical files.
"""

import math
import os

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
            "#17becf", "#7f7f7f")
_MARGIN = (56.0, 16.0, 34.0, 42.0)  # left, right, top, bottom


def _fmt(v: float) -> str:
    """Short deterministic number label."""
    if v == 0:
        return "0"
    text = f"{v:.6g}"
    return text


def _ticks(lo: float, hi: float, target: int = 5) -> list[float]:
    """Round tick positions covering [lo, hi]."""
    span = hi - lo
    raw = span / max(target, 1)
    mag = 10.0 ** math.floor(math.log10(raw))
    step = 10.0 * mag
    for mult in (1.0, 2.0, 2.5, 5.0, 10.0):
        if span / (mult * mag) <= target:
            step = mult * mag
            break
    first = math.ceil(lo / step - 1e-9) * step
    ticks = []
    k = 0
    while first + k * step <= hi + 1e-9 * max(span, 1.0):
        ticks.append(first + k * step)
        k += 1
    return ticks


def line_chart(path: str | os.PathLike, series: list[tuple[str, list[float], list[float]]],
               title: str = "", xlabel: str = "", ylabel: str = "",
               width: int = 640, height: int = 400) -> None:
    """Write a line chart; ``series`` is a list of (name, xs, ys)."""
    if not series:
        raise ValueError("line_chart needs at least one series")
    for name, xs, ys in series:
        if len(xs) != len(ys) or not xs:
            raise ValueError(f"series {name!r} needs equal, nonzero point counts")

    all_x = [v for _, xs, _ in series for v in xs]
    all_y = [v for _, _, ys in series for v in ys]
    x_lo, x_hi = min(all_x), max(all_x)
    y_lo, y_hi = min(all_y), max(all_y)
    if x_hi == x_lo:
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    # breathing room so lines never sit on the frame
    y_pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - y_pad, y_hi + y_pad

    ml, mr, mt, mb = _MARGIN
    pw, ph = width - ml - mr, height - mt - mb

    def px(v: float) -> float:
        return ml + (v - x_lo) / (x_hi - x_lo) * pw

    def py(v: float) -> float:
        return mt + ph - (v - y_lo) / (y_hi - y_lo) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
           f'height="{height}" viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>']
    if title:
        out.append(f'<text x="{width / 2:.1f}" y="20" font-family="sans-serif" '
                   f'font-size="14" text-anchor="middle">{title}</text>')

    for tx in _ticks(x_lo, x_hi):
        x = px(tx)
        out.append(f'<line x1="{x:.2f}" y1="{mt:.2f}" x2="{x:.2f}" '
                   f'y2="{mt + ph:.2f}" stroke="#dddddd" stroke-width="1"/>')
        out.append(f'<text x="{x:.2f}" y="{mt + ph + 16:.2f}" font-family="sans-serif" '
                   f'font-size="11" text-anchor="middle">{_fmt(tx)}</text>')
    for ty in _ticks(y_lo, y_hi):
        y = py(ty)
        out.append(f'<line x1="{ml:.2f}" y1="{y:.2f}" x2="{ml + pw:.2f}" '
                   f'y2="{y:.2f}" stroke="#dddddd" stroke-width="1"/>')
        out.append(f'<text x="{ml - 6:.2f}" y="{y + 4:.2f}" font-family="sans-serif" '
                   f'font-size="11" text-anchor="end">{_fmt(ty)}</text>')

    out.append(f'<rect x="{ml:.2f}" y="{mt:.2f}" width="{pw:.2f}" height="{ph:.2f}" '
               f'fill="none" stroke="#333333" stroke-width="1"/>')
    if xlabel:
        out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 8:.1f}" '
                   f'font-family="sans-serif" font-size="12" '
                   f'text-anchor="middle">{xlabel}</text>')
    if ylabel:
        out.append(f'<text x="14" y="{mt + ph / 2:.1f}" font-family="sans-serif" '
                   f'font-size="12" text-anchor="middle" '
                   f'transform="rotate(-90 14 {mt + ph / 2:.1f})">{ylabel}</text>')

    for idx, (name, xs, ys) in enumerate(series):
        color = _PALETTE[idx % len(_PALETTE)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                   f'stroke-width="2"/>')
        if len(xs) <= 32:
            for x, y in zip(xs, ys):
                out.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="3" '
                           f'fill="{color}"/>')
        ly = mt + 14 + 16 * idx
        lx = ml + pw - 150
        out.append(f'<line x1="{lx:.2f}" y1="{ly - 4:.2f}" x2="{lx + 22:.2f}" '
                   f'y2="{ly - 4:.2f}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 28:.2f}" y="{ly:.2f}" font-family="sans-serif" '
                   f'font-size="11">{name}</text>')

    out.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(out) + "\n")
