"""Minimal standalone SVG charts (line plot and heatmap)."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def _frame(width: int, height: int, title: str, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">')
    lines = [head, f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="14" '
             f'font-family="sans-serif">{escape(title)}</text>']
    return "\n".join(lines + body + ["</svg>", ""])


def line_plot(series: dict[str, list[float]], title: str = "", xlabel: str = "epoch",
              width: int = 480, height: int = 300) -> str:
    """One polyline per named series over x = 1..n."""
    left, right, top, bottom = 55, 110, 30, 40
    values = [v for ys in series.values() for v in ys if np.isfinite(v)]
    lo, hi = (min(values), max(values)) if values else (0.0, 1.0)
    if hi == lo:
        hi = lo + 1.0
    n = max((len(ys) for ys in series.values()), default=1)
    pw, ph = width - left - right, height - top - bottom

    def xy(i, v):
        x = left + (pw * i / max(n - 1, 1))
        y = top + ph * (1.0 - (v - lo) / (hi - lo))
        return f"{x:.2f},{y:.2f}"

    body = [f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
            f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
            f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle" font-size="11" '
            f'font-family="sans-serif">{escape(xlabel)}</text>']
    for v, y in ((hi, top), (lo, top + ph)):
        body.append(f'<text x="{left - 4}" y="{y + 4:.1f}" text-anchor="end" font-size="10" '
                    f'font-family="sans-serif">{v:.4g}</text>')
    for j, (name, ys) in enumerate(series.items()):
        color = _PALETTE[j % len(_PALETTE)]
        pts = " ".join(xy(i, v) for i, v in enumerate(ys) if np.isfinite(v))
        body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        body.append(f'<text x="{left + pw + 8}" y="{top + 14 * (j + 1)}" font-size="11" fill="{color}" '
                    f'font-family="sans-serif">{escape(name)}</text>')
    return _frame(width, height, title, body)


def heatmap(values, row_labels, col_labels, title: str = "", cell: int = 48) -> str:
    """Diverging blue/red grid annotated with the values."""
    v = np.asarray(values, dtype=np.float64)
    left, top = 90, 40
    width, height = left + cell * v.shape[1] + 10, top + cell * v.shape[0] + 10
    scale = np.nanmax(np.abs(v)) if np.isfinite(v).any() and np.nanmax(np.abs(v)) > 0 else 1.0
    body = []
    for j, lab in enumerate(col_labels):
        body.append(f'<text x="{left + cell * (j + 0.5):.1f}" y="{top - 6}" text-anchor="middle" '
                    f'font-size="10" font-family="sans-serif">{escape(str(lab))}</text>')
    for i, lab in enumerate(row_labels):
        y = top + cell * i
        body.append(f'<text x="{left - 6}" y="{y + cell / 2 + 4:.1f}" text-anchor="end" font-size="10" '
                    f'font-family="sans-serif">{escape(str(lab))}</text>')
        for j in range(v.shape[1]):
            s = 0.0 if not np.isfinite(v[i, j]) else v[i, j] / scale
            r, g, b = (255, int(255 * (1 - s)), int(255 * (1 - s))) if s >= 0 else \
                (int(255 * (1 + s)), int(255 * (1 + s)), 255)
            x = left + cell * j
            body.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                        f'fill="rgb({r},{g},{b})" stroke="#888"/>')
            body.append(f'<text x="{x + cell / 2:.1f}" y="{y + cell / 2 + 4:.1f}" text-anchor="middle" '
                        f'font-size="10" font-family="sans-serif">{v[i, j]:.3g}</text>')
    return _frame(width, height, title, body)
