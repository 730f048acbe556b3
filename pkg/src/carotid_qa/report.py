"""Table merge and minimal SVG line charts for sweep summaries."""
from __future__ import annotations

import csv
from pathlib import Path

from .qa import read_correlation_csv, write_correlation_csv

COLORS = {"single_none": "#444444", "dropout_mean": "#1f77b4", "dropout_polar": "#d62728",
          "centers_polar": "#2ca02c"}
PANELS = (("median_dice", "median Dice"), ("median_uncertainty", "median uncertainty"))


def merge_correlations(paths, out_path):
    """Concatenate Table-1-shaped correlation CSVs in the given order."""
    rows = []
    for p in paths:
        rows += read_correlation_csv(p)
    write_correlation_csv(rows, out_path)
    return rows


def read_summary_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("level", "median_dice", "iqr_dice", "median_uncertainty", "iqr_uncertainty"):
            r[k] = float(r[k])
    return rows


def _num(x):
    return format(x, ".2f")


def _tick(x):
    return format(x, ".3g")


def _panel(rows, key, label, structure, x0, y0, w, h, levels):
    """SVG elements of one panel: axes, ticks and one polyline per method."""
    series = {}
    for r in rows:
        if r["structure"] == structure:
            series.setdefault(r["method"], []).append((r["level"], r[key]))
    ys = [v for pts in series.values() for _, v in pts]
    lo, hi = (min(ys), max(ys)) if ys else (0.0, 1.0)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    xmin, xmax = levels[0], levels[-1] if levels[-1] > levels[0] else levels[0] + 1.0

    def sx(v):
        return x0 + (v - xmin) / (xmax - xmin) * w

    def sy(v):
        return y0 + h - (v - lo) / (hi - lo) * h

    out = [
        f'<line x1="{_num(x0)}" y1="{_num(y0 + h)}" x2="{_num(x0 + w)}" y2="{_num(y0 + h)}" stroke="black"/>',
        f'<line x1="{_num(x0)}" y1="{_num(y0)}" x2="{_num(x0)}" y2="{_num(y0 + h)}" stroke="black"/>',
        f'<text x="{_num(x0)}" y="{_num(y0 - 8)}" font-size="12">{label} ({structure})</text>',
    ]
    for lv in levels:
        out.append(f'<text x="{_num(sx(lv))}" y="{_num(y0 + h + 14)}" font-size="9" '
                   f'text-anchor="middle">{_tick(lv)}</text>')
    for v in (lo + pad, 0.5 * (lo + hi), hi - pad):
        out.append(f'<text x="{_num(x0 - 4)}" y="{_num(sy(v) + 3)}" font-size="9" '
                   f'text-anchor="end">{_tick(v)}</text>')
    for method in sorted(series):
        pts = " ".join(f"{_num(sx(a))},{_num(sy(b))}" for a, b in series[method])
        color = COLORS.get(method, "#000000")
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
    return out


def sweep_chart(rows, title, path, x_label="level"):
    """Median Dice and median uncertainty against level, one column per structure."""
    levels = sorted({r["level"] for r in rows})
    methods = sorted({r["method"] for r in rows})
    pw, ph, left, top = 300, 180, 60, 50
    width = left + 2 * (pw + left) + 140
    height = top + 2 * (ph + 60)
    body = [f'<text x="{left}" y="24" font-size="14">{title}</text>']
    for col, structure in enumerate(("lumen", "wall")):
        for row, (key, label) in enumerate(PANELS):
            body += _panel(rows, key, label, structure, left + col * (pw + left), top + row * (ph + 60),
                           pw, ph, levels)
        body.append(f'<text x="{left + col * (pw + left) + pw / 2:.2f}" y="{height - 8}" font-size="10" '
                    f'text-anchor="middle">{x_label}</text>')
    lx = left + 2 * (pw + left)
    for i, m in enumerate(methods):
        y = top + 14 * i
        body.append(f'<line x1="{lx}" y1="{y}" x2="{lx + 20}" y2="{y}" stroke="{COLORS.get(m, "#000000")}" '
                    f'stroke-width="2"/>')
        body.append(f'<text x="{lx + 24}" y="{y + 4}" font-size="10">{m}</text>')
    svg = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        *body,
        "</svg>",
    ]
    Path(path).write_text("\n".join(svg) + "\n", encoding="utf-8")
    return path
