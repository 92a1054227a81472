"""Tiny SVG emitter for heatmaps, line charts and grouped bars.

CSV files are the authoritative experiment outputs; these drawings are for
looking at.
"""

from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

# viridis anchors
_CMAP = np.array([
    [68, 1, 84],
    [59, 82, 139],
    [33, 145, 140],
    [94, 201, 98],
    [253, 231, 37],
], dtype=float)
_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"]


def colormap(t: float) -> str:
    t = min(max(float(t), 0.0), 1.0) * (len(_CMAP) - 1)
    i = min(int(t), len(_CMAP) - 2)
    c = _CMAP[i] + (t - i) * (_CMAP[i + 1] - _CMAP[i])
    return "#%02x%02x%02x" % tuple(int(round(x)) for x in c)


def _fmt(x: float) -> str:
    if not math.isfinite(x):
        return "–"
    if x == 0:
        return "0"
    a = abs(x)
    if 1e-2 <= a < 1e4:
        return f"{x:.3g}"
    return f"{x:.2e}"


class Svg:
    def __init__(self, width: int, height: int):
        self.width, self.height = width, height
        self.parts: list[str] = []

    def rect(self, x, y, w, h, fill, stroke="none"):
        self.parts.append(
            f'<rect x="{x:.2f}" y="{y:.2f}" width="{w:.2f}" height="{h:.2f}" fill="{fill}" stroke="{stroke}"/>'
        )

    def line(self, x1, y1, x2, y2, stroke="#000", width=1.0, dash=None):
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(
            f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" stroke="{stroke}" stroke-width="{width}"{d}/>'
        )

    def polyline(self, pts, stroke, width=1.5):
        p = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
        self.parts.append(f'<polyline points="{p}" fill="none" stroke="{stroke}" stroke-width="{width}"/>')

    def text(self, x, y, s, size=11, anchor="start", rotate=None, fill="#000"):
        r = f' transform="rotate({rotate} {x:.2f} {y:.2f})"' if rotate is not None else ""
        self.parts.append(
            f'<text x="{x:.2f}" y="{y:.2f}" font-family="sans-serif" font-size="{size}" '
            f'text-anchor="{anchor}" fill="{fill}"{r}>{escape(str(s))}</text>'
        )

    def render(self) -> str:
        body = "\n".join(self.parts)
        return (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}" '
            f'viewBox="0 0 {self.width} {self.height}">\n'
            f'<rect width="100%" height="100%" fill="#fff"/>\n{body}\n</svg>\n'
        )

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.render(), encoding="utf-8")
        return path


def _ticks(lo, hi, n=5):
    if hi == lo:
        return [lo]
    return list(np.linspace(lo, hi, n))


def heatmap(values, row_labels, col_labels, title="", legend_label="", suppressed=None, annotate=None, path=None) -> Svg:
    """Cell grid with a colour legend. `suppressed` cells are drawn grey with "–"."""
    v = np.asarray(values, dtype=float)
    nr, nc = v.shape
    sup = np.zeros_like(v, dtype=bool) if suppressed is None else np.asarray(suppressed, bool)
    annotate = (nr * nc <= 400) if annotate is None else annotate
    cell = max(4.0, min(48.0, 560.0 / max(nr, nc)))
    left, top = 120, 40
    w = int(left + nc * cell + 110)
    h = int(top + nr * cell + 60)
    s = Svg(w, h)
    s.text(w / 2, 22, title, size=14, anchor="middle")
    shown = v[~sup & np.isfinite(v)]
    lo, hi = (float(shown.min()), float(shown.max())) if shown.size else (0.0, 1.0)
    span = hi - lo if hi > lo else 1.0
    for i in range(nr):
        for j in range(nc):
            x, y = left + j * cell, top + i * cell
            if sup[i, j] or not np.isfinite(v[i, j]):
                s.rect(x, y, cell, cell, "#cccccc")
                if annotate:
                    s.text(x + cell / 2, y + cell / 2 + 4, "–", size=10, anchor="middle")
                continue
            t = (v[i, j] - lo) / span
            s.rect(x, y, cell, cell, colormap(t))
            if annotate:
                s.text(x + cell / 2, y + cell / 2 + 4, _fmt(v[i, j]), size=9, anchor="middle",
                       fill="#000" if t > 0.5 else "#fff")
    step_r = max(1, nr // 25)
    for i in range(0, nr, step_r):
        s.text(left - 6, top + i * cell + cell / 2 + 4, row_labels[i], size=10, anchor="end")
    step_c = max(1, nc // 25)
    for j in range(0, nc, step_c):
        s.text(left + j * cell + cell / 2, top + nr * cell + 14, col_labels[j], size=10, anchor="middle")
    # legend
    lx, ly, lh = left + nc * cell + 20, top, nr * cell
    for k in range(50):
        s.rect(lx, ly + lh * (1 - (k + 1) / 50), 14, lh / 50 + 0.5, colormap(k / 49))
    for t in _ticks(lo, hi):
        y = ly + lh * (1 - (t - lo) / span)
        s.text(lx + 18, y + 4, _fmt(t), size=9)
    s.text(lx + 7, ly + lh + 18, legend_label, size=10, anchor="middle")
    if path is not None:
        s.save(path)
    return s


def line_chart(series: dict, xlabel="", ylabel="", title="", hlines=(), path=None, width=640, height=400) -> Svg:
    """`series` maps a name to (x, y); NaNs break nothing, they are skipped."""
    left, right, top, bottom = 70, 150, 36, 50
    s = Svg(width, height)
    pw, ph = width - left - right, height - top - bottom
    xs = np.concatenate([np.asarray(x, float) for x, _ in series.values()]) if series else np.array([0.0, 1.0])
    ys = np.concatenate([np.asarray(y, float) for _, y in series.values()] + [np.asarray(hlines, float)]) if series else np.array([0.0, 1.0])
    xs, ys = xs[np.isfinite(xs)], ys[np.isfinite(ys)]
    x0, x1 = (xs.min(), xs.max()) if xs.size else (0.0, 1.0)
    y0, y1 = (ys.min(), ys.max()) if ys.size else (0.0, 1.0)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + (1 - (y - y0) / (y1 - y0)) * ph

    s.text(width / 2 - right / 2 + left / 2, 22, title, size=14, anchor="middle")
    s.line(left, top + ph, left + pw, top + ph)
    s.line(left, top, left, top + ph)
    for t in _ticks(x0, x1):
        s.line(px(t), top + ph, px(t), top + ph + 4)
        s.text(px(t), top + ph + 16, _fmt(t), size=10, anchor="middle")
    for t in _ticks(y0, y1):
        s.line(left - 4, py(t), left, py(t))
        s.text(left - 6, py(t) + 4, _fmt(t), size=10, anchor="end")
    for hv in hlines:
        s.line(left, py(hv), left + pw, py(hv), stroke="#888", dash="4,3")
    s.text(left + pw / 2, height - 12, xlabel, size=11, anchor="middle")
    s.text(16, top + ph / 2, ylabel, size=11, anchor="middle", rotate=-90)
    for k, (name, (x, y)) in enumerate(series.items()):
        color = _PALETTE[k % len(_PALETTE)]
        x, y = np.asarray(x, float), np.asarray(y, float)
        ok = np.isfinite(x) & np.isfinite(y)
        # break the line at gaps
        seg = []
        for xi, yi, good in zip(x, y, ok):
            if good:
                seg.append((px(xi), py(yi)))
            elif seg:
                s.polyline(seg, color)
                seg = []
        if seg:
            s.polyline(seg, color)
        s.line(left + pw + 12, top + 10 + 16 * k, left + pw + 30, top + 10 + 16 * k, stroke=color, width=2)
        s.text(left + pw + 34, top + 14 + 16 * k, name, size=10)
    if path is not None:
        s.save(path)
    return s


def bar_chart(groups: list[str], series: dict, ylabel="", title="", path=None, width=640, height=400) -> Svg:
    """Grouped bars: `series` maps a legend name to one value per group."""
    left, right, top, bottom = 70, 150, 36, 60
    s = Svg(width, height)
    pw, ph = width - left - right, height - top - bottom
    vals = np.array([v for vs in series.values() for v in vs], float)
    vals = vals[np.isfinite(vals)]
    ymax = float(vals.max()) * 1.1 if vals.size and vals.max() > 0 else 1.0
    s.text(width / 2 - right / 2 + left / 2, 22, title, size=14, anchor="middle")
    s.line(left, top + ph, left + pw, top + ph)
    s.line(left, top, left, top + ph)
    for t in _ticks(0, ymax):
        y = top + (1 - t / ymax) * ph
        s.line(left - 4, y, left, y)
        s.text(left - 6, y + 4, _fmt(t), size=10, anchor="end")
    s.text(16, top + ph / 2, ylabel, size=11, anchor="middle", rotate=-90)
    ng, ns = len(groups), max(len(series), 1)
    gw = pw / max(ng, 1)
    bw = 0.8 * gw / ns
    for k, (name, vs) in enumerate(series.items()):
        color = _PALETTE[k % len(_PALETTE)]
        for g, v in enumerate(vs):
            if not np.isfinite(v):
                continue
            x = left + g * gw + 0.1 * gw + k * bw
            hgt = v / ymax * ph
            s.rect(x, top + ph - hgt, bw, hgt, color)
        s.rect(left + pw + 12, top + 4 + 16 * k, 12, 10, color)
        s.text(left + pw + 28, top + 13 + 16 * k, name, size=10)
    for g, name in enumerate(groups):
        s.text(left + g * gw + gw / 2, top + ph + 16, name, size=10, anchor="middle")
    if path is not None:
        s.save(path)
    return s
