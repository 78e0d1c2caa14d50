"""Static SVG line charts of training metrics."""
from __future__ import annotations

import csv
import io
import math
from pathlib import Path

WIDTH, HEIGHT = 720, 420
MARGIN = 56
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


class PlotError(ValueError):
    pass


def read_series(path) -> tuple[str, list[float], dict[str, list[float]]]:
    """Parse a CSV whose first column is the x axis and the rest numeric series."""
    text = Path(path).read_text(encoding="utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or not rows[0]:
        raise PlotError(f"{path}: missing header")
    header = [h.strip() for h in rows[0]]
    xs, series = [], {name: [] for name in header[1:]}
    for lineno, row in enumerate(rows[1:], 2):
        if not row:
            continue
        if len(row) != len(header):
            raise PlotError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            values = [float(v) for v in row]
        except ValueError as exc:
            raise PlotError(f"{path}:{lineno}: non-numeric field") from exc
        xs.append(values[0])
        for name, v in zip(header[1:], values[1:]):
            series[name].append(v)
    return header[0], xs, series


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def render_svg(x_name: str, xs: list[float], series: dict[str, tuple[list[float], list[float]]], title: str = "") -> str:
    """One polyline per series; ``series`` maps name -> (xs, ys)."""
    all_x = [x for sx, _ in series.values() for x in sx] or xs or [0.0, 1.0]
    all_y = [y for _, sy in series.values() for y in sy if math.isfinite(y)] or [0.0, 1.0]
    x0, x1 = min(all_x), max(all_x)
    y0, y1 = min(all_y), max(all_y)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    pw, ph = WIDTH - 2 * MARGIN, HEIGHT - 2 * MARGIN

    def px(x):
        return MARGIN + (x - x0) / (x1 - x0) * pw

    def py(y):
        return HEIGHT - MARGIN - (y - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<line class="axis" x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>',
        f'<line class="axis" x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>',
        f'<text x="{WIDTH / 2}" y="{HEIGHT - 14}" text-anchor="middle" font-size="12">{x_name}</text>',
        f'<text x="{MARGIN}" y="{HEIGHT - MARGIN + 16}" font-size="10">{_fmt(x0)}</text>',
        f'<text x="{WIDTH - MARGIN}" y="{HEIGHT - MARGIN + 16}" text-anchor="end" font-size="10">{_fmt(x1)}</text>',
        f'<text x="{MARGIN - 4}" y="{HEIGHT - MARGIN}" text-anchor="end" font-size="10">{_fmt(y0)}</text>',
        f'<text x="{MARGIN - 4}" y="{MARGIN + 4}" text-anchor="end" font-size="10">{_fmt(y1)}</text>',
    ]
    if title:
        out.append(f'<text x="{WIDTH / 2}" y="24" text-anchor="middle" font-size="14">{title}</text>')
    for k, (name, (sx, sy)) in enumerate(series.items()):
        color = COLORS[k % len(COLORS)]
        out.append(f'<text x="{WIDTH - MARGIN + 4}" y="{MARGIN + 14 * k}" font-size="10" fill="{color}">{name}</text>')
        if not sx:
            continue
        points = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in zip(sx, sy) if math.isfinite(y))
        out.append(f'<polyline data-series="{name}" fill="none" stroke="{color}" stroke-width="1.5" points="{points}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_metrics(metrics_csv, output_svg, probe_csv=None) -> str:
    """Chart every numeric metrics column (and the probe alignment, if given)."""
    x_name, xs, cols = read_series(metrics_csv)
    series = {name: (xs, ys) for name, ys in cols.items()}
    if probe_csv is not None:
        _, pxs, pcols = read_series(probe_csv)
        for name, ys in pcols.items():
            series[name] = (pxs, ys)
    svg = render_svg(x_name, xs, series, title="training metrics")
    Path(output_svg).write_text(svg, encoding="utf-8")
    return svg
