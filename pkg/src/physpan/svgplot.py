"""Tiny dependency-free SVG charts for reports.

Text-based output keeps plots diffable and deterministic; only the handful
of chart features the reporting commands need are implemented.
"""

from __future__ import annotations

from pathlib import Path

_COLORS = ("#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377")


def _header(width, height, title):
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="14" '
             f'font-family="sans-serif">{title}</text>']
    return parts


def bar_chart(values, path, title: str, x_label: str = "", y_label: str = "",
              x_offset: int = 0) -> None:
    """One bar per value; bar x labels start at `x_offset`."""
    values = [float(v) for v in values]
    width, height = 640, 360
    left, right, top, bottom = 50, 15, 30, 45
    plot_w = width - left - right
    plot_h = height - top - bottom
    vmax = max(max(values), 1e-12)
    n = len(values)
    bar_w = plot_w / n
    parts = _header(width, height, title)
    parts.append(f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" y2="{top + plot_h}" '
                 f'stroke="black"/>')
    parts.append(f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>')
    for i, v in enumerate(values):
        h = plot_h * v / vmax
        x = left + i * bar_w
        y = top + plot_h - h
        parts.append(f'<rect class="bar" x="{x:.2f}" y="{y:.2f}" width="{bar_w * 0.9:.2f}" '
                     f'height="{h:.2f}" fill="{_COLORS[0]}"/>')
        if n <= 50 and (i % max(1, n // 10) == 0 or i == n - 1):
            parts.append(f'<text x="{x + bar_w / 2:.1f}" y="{top + plot_h + 14}" text-anchor="middle" '
                         f'font-size="9" font-family="sans-serif">{i + x_offset}</text>')
    parts.append(f'<text x="{left - 8}" y="{top + 8}" text-anchor="end" font-size="9" '
                 f'font-family="sans-serif">{vmax:.3g}</text>')
    if x_label:
        parts.append(f'<text x="{left + plot_w / 2:.1f}" y="{height - 8}" text-anchor="middle" '
                     f'font-size="11" font-family="sans-serif">{x_label}</text>')
    if y_label:
        parts.append(f'<text x="14" y="{top + plot_h / 2:.1f}" font-size="11" font-family="sans-serif" '
                     f'transform="rotate(-90 14 {top + plot_h / 2:.1f})" text-anchor="middle">{y_label}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))


def line_chart(series: dict[str, tuple[list, list]], path, title: str,
               x_label: str = "", y_label: str = "") -> None:
    """series maps a legend name to (xs, ys); non-finite points are skipped."""
    import math

    width, height = 640, 360
    left, right, top, bottom = 55, 15, 30, 45
    plot_w = width - left - right
    plot_h = height - top - bottom
    pts = [(x, y) for xs, ys in series.values() for x, y in zip(xs, ys) if math.isfinite(y)]
    if not pts:
        pts = [(0.0, 0.0), (1.0, 1.0)]
    x_lo, x_hi = min(p[0] for p in pts), max(p[0] for p in pts)
    y_lo, y_hi = min(p[1] for p in pts), max(p[1] for p in pts)
    if x_hi == x_lo:
        x_hi = x_lo + 1
    if y_hi == y_lo:
        y_hi = y_lo + 1

    def sx(x):
        return left + plot_w * (x - x_lo) / (x_hi - x_lo)

    def sy(y):
        return top + plot_h * (1 - (y - y_lo) / (y_hi - y_lo))

    parts = _header(width, height, title)
    parts.append(f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" y2="{top + plot_h}" stroke="black"/>')
    parts.append(f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>')
    for idx, (name, (xs, ys)) in enumerate(series.items()):
        color = _COLORS[idx % len(_COLORS)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys) if math.isfinite(y))
        if coords:
            parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{left + plot_w - 4}" y="{top + 14 + 13 * idx}" text-anchor="end" '
                     f'font-size="10" font-family="sans-serif" fill="{color}">{name}</text>')
    parts.append(f'<text x="{left - 8}" y="{top + 8}" text-anchor="end" font-size="9" '
                 f'font-family="sans-serif">{y_hi:.3g}</text>')
    parts.append(f'<text x="{left - 8}" y="{top + plot_h}" text-anchor="end" font-size="9" '
                 f'font-family="sans-serif">{y_lo:.3g}</text>')
    if x_label:
        parts.append(f'<text x="{left + plot_w / 2:.1f}" y="{height - 8}" text-anchor="middle" '
                     f'font-size="11" font-family="sans-serif">{x_label}</text>')
    if y_label:
        parts.append(f'<text x="14" y="{top + plot_h / 2:.1f}" font-size="11" font-family="sans-serif" '
                     f'transform="rotate(-90 14 {top + plot_h / 2:.1f})" text-anchor="middle">{y_label}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))
