"""Deterministic SVG training-curve charts from metrics CSV files.

One chart, two y axes: training loss on the left drawn dashed, test error
percentage on the right drawn solid, iterations along x. Output bytes depend
only on the input rows, so identical inputs give byte-identical files.
"""

from __future__ import annotations

import os

from .train import read_metrics_csv

WIDTH, HEIGHT = 960, 540
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 70, 40, 60

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
           "#8c564b", "#17becf", "#7f7f7f"]


class PlotError(ValueError):
    pass


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _scale(v, lo, hi, out_lo, out_hi):
    if hi == lo:
        return (out_lo + out_hi) / 2.0
    return out_lo + (v - lo) * (out_hi - out_lo) / (hi - lo)


def _series_svg(points, color, dashed):
    if len(points) == 1:
        x, y = points[0]
        return f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="3" fill="{color}"/>'
    path = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in points)
    dash = ' stroke-dasharray="6,4"' if dashed else ""
    return (f'<polyline points="{path}" fill="none" stroke="{color}" '
            f'stroke-width="1.5"{dash}/>')


def render_curves(csv_paths) -> str:
    """Render one SVG from one or more metrics CSVs."""
    runs = []
    for path in csv_paths:
        rows = read_metrics_csv(path)
        if not rows:
            raise PlotError(f"{path}: metrics file has no data rows")
        label = os.path.splitext(os.path.basename(path))[0]
        runs.append((label, rows))

    max_iter = max(r["iter"] for _, rows in runs for r in rows)
    max_loss = max(r["train_loss"] for _, rows in runs for r in rows)
    errs = [r["test_err"] for _, rows in runs for r in rows if r["test_err"] is not None]
    max_err = max(errs) if errs else 100.0
    loss_hi = max_loss * 1.05 if max_loss > 0 else 1.0
    err_hi = max_err * 1.05 if max_err > 0 else 1.0

    x0, x1 = MARGIN_L, WIDTH - MARGIN_R
    y0, y1 = HEIGHT - MARGIN_B, MARGIN_T

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<rect x="{x0}" y="{y1}" width="{x1 - x0}" height="{y0 - y1}" '
        'fill="none" stroke="#cccccc"/>',
    ]

    for i in range(6):
        frac = i / 5.0
        xt = _scale(frac * max_iter, 0, max_iter if max_iter else 1, x0, x1)
        yt = _scale(frac * loss_hi, 0, loss_hi, y0, y1)
        ye = _scale(frac * err_hi, 0, err_hi, y0, y1)
        parts.append(f'<line x1="{_fmt(xt)}" y1="{y0}" x2="{_fmt(xt)}" y2="{y0 + 4}" stroke="#666666"/>')
        parts.append(f'<text x="{_fmt(xt)}" y="{y0 + 18}" font-size="11" text-anchor="middle" '
                     f'fill="#333333">{frac * max_iter:.0f}</text>')
        parts.append(f'<text x="{x0 - 8}" y="{_fmt(yt + 4)}" font-size="11" text-anchor="end" '
                     f'fill="#333333">{frac * loss_hi:.3g}</text>')
        parts.append(f'<text x="{x1 + 8}" y="{_fmt(ye + 4)}" font-size="11" text-anchor="start" '
                     f'fill="#333333">{frac * err_hi:.3g}</text>')

    parts.append(f'<text x="{(x0 + x1) // 2}" y="{HEIGHT - 18}" font-size="13" '
                 'text-anchor="middle" fill="#333333">iterations</text>')
    parts.append(f'<text x="18" y="{(y0 + y1) // 2}" font-size="13" text-anchor="middle" '
                 f'fill="#333333" transform="rotate(-90 18 {(y0 + y1) // 2})">training loss (dashed)</text>')
    parts.append(f'<text x="{WIDTH - 14}" y="{(y0 + y1) // 2}" font-size="13" text-anchor="middle" '
                 f'fill="#333333" transform="rotate(90 {WIDTH - 14} {(y0 + y1) // 2})">test error % (solid)</text>')

    for i, (label, rows) in enumerate(runs):
        color = PALETTE[i % len(PALETTE)]
        loss_pts = [(_scale(r["iter"], 0, max_iter if max_iter else 1, x0, x1),
                     _scale(r["train_loss"], 0, loss_hi, y0, y1)) for r in rows]
        parts.append(_series_svg(loss_pts, color, dashed=True))
        err_pts = [(_scale(r["iter"], 0, max_iter if max_iter else 1, x0, x1),
                    _scale(r["test_err"], 0, err_hi, y0, y1))
                   for r in rows if r["test_err"] is not None]
        if err_pts:
            parts.append(_series_svg(err_pts, color, dashed=False))
        ly = MARGIN_T + 16 + 16 * i
        parts.append(f'<line x1="{x0 + 8}" y1="{ly - 4}" x2="{x0 + 30}" y2="{ly - 4}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{x0 + 36}" y="{ly}" font-size="12" fill="#333333">{label}</text>')

    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_plot(csv_paths, out_path) -> None:
    svg = render_curves(csv_paths)
    with open(out_path, "w", encoding="utf-8") as f:
        f.write(svg)
