"""Dependency-free SVG rendering of sweep results: heat maps and line charts."""
from __future__ import annotations

import csv
from html import escape
from pathlib import Path

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


class PlotError(ValueError):
    pass


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise PlotError(f"{path}: no data rows")
    return rows


def _num(v: str) -> float:
    try:
        return float(v)
    except (TypeError, ValueError):
        raise PlotError(f"non-numeric value {v!r}") from None


def _fmt(v: float) -> str:
    return f"{v:g}"


def _svg(width: int, height: int, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">')
    return "\n".join([head, f'<rect width="{width}" height="{height}" fill="white"/>', *body, "</svg>"]) + "\n"


def _shade(t: float) -> str:
    """White to dark red as t goes 0 to 1."""
    t = float(np.clip(t, 0.0, 1.0))
    r = int(round(255 - t * (255 - 165)))
    gb = int(round(255 - t * 255))
    return f"#{r:02x}{gb:02x}{gb:02x}"


def heatmap_svg(rows: list[dict], x: str, y: str, value: str = "mean", title: str = "") -> str:
    """Grid of cells coloured by ``value``; x/y are column names of the grid coordinates."""
    for col in (x, y, value):
        if col not in rows[0]:
            raise PlotError(f"column {col!r} not in CSV header {list(rows[0])}")
    xs = sorted({_num(r[x]) for r in rows})
    ys = sorted({_num(r[y]) for r in rows})
    grid = np.full((len(ys), len(xs)), np.nan)
    for r in rows:
        grid[ys.index(_num(r[y])), xs.index(_num(r[x]))] = _num(r[value])
    lo, hi = np.nanmin(grid), np.nanmax(grid)
    span = hi - lo if hi > lo else 1.0
    cell, left, top = 60, 70, 40
    width, height = left + cell * len(xs) + 20, top + cell * len(ys) + 50
    body = [f'<text x="{width / 2}" y="20" text-anchor="middle">{escape(title)}</text>']
    for i, yv in enumerate(ys):
        # largest y on top
        row_y = top + cell * (len(ys) - 1 - i)
        body.append(f'<text x="{left - 8}" y="{row_y + cell / 2 + 4}" text-anchor="end">{_fmt(yv)}</text>')
        for j in range(len(xs)):
            v = grid[i, j]
            fill = "#dddddd" if np.isnan(v) else _shade((v - lo) / span)
            cx = left + cell * j
            body.append(f'<rect x="{cx}" y="{row_y}" width="{cell}" height="{cell}" fill="{fill}" stroke="white"/>')
            if not np.isnan(v):
                body.append(f'<text x="{cx + cell / 2}" y="{row_y + cell / 2 + 4}" text-anchor="middle">{v:.3f}</text>')
    base = top + cell * len(ys)
    for j, xv in enumerate(xs):
        body.append(f'<text x="{left + cell * j + cell / 2}" y="{base + 16}" text-anchor="middle">{_fmt(xv)}</text>')
    body.append(f'<text x="{left + cell * len(xs) / 2}" y="{base + 36}" text-anchor="middle">{escape(x)}</text>')
    body.append(f'<text x="14" y="{top + cell * len(ys) / 2}" text-anchor="middle" '
                f'transform="rotate(-90 14 {top + cell * len(ys) / 2})">{escape(y)}</text>')
    return _svg(width, height, body)


def line_svg(series: dict[str, list[dict]], x: str, value: str = "mean", title: str = "") -> str:
    """One polyline per named series, with a legend."""
    if not series:
        raise PlotError("no series to plot")
    pts = {}
    for name, rows in series.items():
        if not rows:
            raise PlotError(f"series {name!r}: no data rows")
        for col in (x, value):
            if col not in rows[0]:
                raise PlotError(f"series {name!r}: column {col!r} missing")
        pts[name] = sorted((_num(r[x]), _num(r[value])) for r in rows)
    allx = [p[0] for v in pts.values() for p in v]
    ally = [p[1] for v in pts.values() for p in v]
    x0, x1 = min(allx), max(allx)
    y0, y1 = min(ally), max(ally)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 0.05, y1 + 0.05
    width, height, left, right, top, bottom = 480, 320, 60, 130, 36, 46
    pw, ph = width - left - right, height - top - bottom

    def sx(v):
        return left + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return top + ph - (v - y0) / (y1 - y0) * ph

    body = [f'<text x="{left + pw / 2}" y="20" text-anchor="middle">{escape(title)}</text>',
            f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
            f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for xv in sorted(set(allx)):
        body.append(f'<text x="{sx(xv):.1f}" y="{top + ph + 16}" text-anchor="middle">{_fmt(xv)}</text>')
    for yv in np.linspace(y0, y1, 5):
        body.append(f'<text x="{left - 6}" y="{sy(yv) + 4:.1f}" text-anchor="end">{yv:.3f}</text>')
    body.append(f'<text x="{left + pw / 2}" y="{height - 8}" text-anchor="middle">{escape(x)}</text>')
    for k, (name, p) in enumerate(pts.items()):
        color = PALETTE[k % len(PALETTE)]
        coords = " ".join(f"{sx(a):.1f},{sy(b):.1f}" for a, b in p)
        body.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        for a, b in p:
            body.append(f'<circle cx="{sx(a):.1f}" cy="{sy(b):.1f}" r="3" fill="{color}"/>')
        ly = top + 14 + 18 * k
        body.append(f'<line x1="{left + pw + 12}" y1="{ly}" x2="{left + pw + 32}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        body.append(f'<text x="{left + pw + 36}" y="{ly + 4}">{escape(name)}</text>')
    return _svg(width, height, body)


def plot_heatmap(csv_path, out_path, x: str = "lam", y: str = "p", value: str = "mean", title: str = "") -> None:
    Path(out_path).write_text(heatmap_svg(read_rows(csv_path), x, y, value, title))


def plot_lines(csv_paths, out_path, x: str, value: str = "mean", labels=None, title: str = "") -> None:
    labels = list(labels) if labels else [Path(p).stem for p in csv_paths]
    if len(labels) != len(csv_paths):
        raise PlotError("one label per input CSV required")
    series = {lab: read_rows(p) for lab, p in zip(labels, csv_paths)}
    Path(out_path).write_text(line_svg(series, x, value, title))
