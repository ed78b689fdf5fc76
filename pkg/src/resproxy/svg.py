"""Minimal SVG line and scatter plots (no plotting dependency)."""
from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _ticks(lo: float, hi: float, n: int = 5) -> np.ndarray:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** np.floor(np.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    return np.arange(np.ceil(lo / step) * step, hi + 0.5 * step, step)


def _fmt(v: float) -> str:
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-2:
        return f"{v:.2g}"
    return f"{v:.4g}"


class Figure:
    """One set of axes; data coordinates are mapped into a fixed pixel box."""

    def __init__(self, title: str = "", xlabel: str = "", ylabel: str = "", width: int = 640,
                 height: int = 420, logy: bool = False):
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel
        self.width, self.height = width, height
        self.logy = logy
        self.margin = (70, 20, 40, 55)  # left, right, top, bottom
        self.series = []
        self.vlines = []

    def line(self, x, y, label: str = "", color: str | None = None, dash: bool = False):
        self.series.append(("line", np.asarray(x, float), np.asarray(y, float), label, color, dash))
        return self

    def scatter(self, x, y, label: str = "", color: str | None = None):
        self.series.append(("scatter", np.asarray(x, float), np.asarray(y, float), label, color, False))
        return self

    def vline(self, x: float, label: str = ""):
        self.vlines.append((float(x), label))
        return self

    def _limits(self):
        xs = np.concatenate([s[1] for s in self.series] + [np.array([v for v, _ in self.vlines])])
        ys = np.concatenate([self._ty(s[2]) for s in self.series])
        xs, ys = xs[np.isfinite(xs)], ys[np.isfinite(ys)]
        if xs.size == 0:
            xs = np.array([0.0, 1.0])
        if ys.size == 0:
            ys = np.array([0.0, 1.0])
        x0, x1 = float(xs.min()), float(xs.max())
        y0, y1 = float(ys.min()), float(ys.max())
        if x1 == x0:
            x0, x1 = x0 - 1, x1 + 1
        if y1 == y0:
            y0, y1 = y0 - 1, y1 + 1
        pad = 0.05 * (y1 - y0)
        return x0, x1, y0 - pad, y1 + pad

    def _ty(self, y):
        return np.log10(np.maximum(y, 1e-300)) if self.logy else y

    def render(self) -> str:
        L, R, T, B = self.margin
        W, H = self.width, self.height
        pw, ph = W - L - R, H - T - B
        x0, x1, y0, y1 = self._limits()

        def px(x):
            return L + (np.asarray(x) - x0) / (x1 - x0) * pw

        def py(y):
            return T + ph - (self._ty(np.asarray(y)) - y0) / (y1 - y0) * ph

        out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
               f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">',
               f'<rect width="{W}" height="{H}" fill="white"/>',
               f'<rect x="{L}" y="{T}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>']
        for t in _ticks(x0, x1):
            if x0 <= t <= x1:
                X = px(t)
                out.append(f'<line x1="{X:.1f}" y1="{T + ph}" x2="{X:.1f}" y2="{T + ph + 4}" stroke="#333"/>')
                out.append(f'<text x="{X:.1f}" y="{T + ph + 16}" text-anchor="middle">{_fmt(t)}</text>')
        for t in _ticks(y0, y1):
            if y0 <= t <= y1:
                Y = T + ph - (t - y0) / (y1 - y0) * ph
                lab = _fmt(10 ** t) if self.logy else _fmt(t)
                out.append(f'<line x1="{L - 4}" y1="{Y:.1f}" x2="{L}" y2="{Y:.1f}" stroke="#333"/>')
                out.append(f'<text x="{L - 6}" y="{Y + 4:.1f}" text-anchor="end">{lab}</text>')
        for i, (kind, x, y, label, color, dash) in enumerate(self.series):
            color = color or PALETTE[i % len(PALETTE)]
            ok = np.isfinite(x) & np.isfinite(self._ty(y))
            X, Y = px(x[ok]), py(y[ok])
            if kind == "line" and X.size:
                pts = " ".join(f"{a:.1f},{b:.1f}" for a, b in zip(X, Y))
                extra = ' stroke-dasharray="5,3"' if dash else ""
                out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"{extra}/>')
            else:
                out.extend(f'<circle cx="{a:.1f}" cy="{b:.1f}" r="3" fill="{color}" fill-opacity="0.7"/>'
                           for a, b in zip(X, Y))
            if label:
                ly = T + 14 + 14 * i
                out.append(f'<rect x="{L + 8}" y="{ly - 8}" width="10" height="3" fill="{color}"/>')
                out.append(f'<text x="{L + 22}" y="{ly - 3}">{escape(label)}</text>')
        for v, label in self.vlines:
            X = float(px(v))
            out.append(f'<line x1="{X:.1f}" y1="{T}" x2="{X:.1f}" y2="{T + ph}" stroke="#555" '
                       f'stroke-dasharray="4,4"/>')
            if label:
                out.append(f'<text x="{X + 4:.1f}" y="{T + 12}">{escape(label)}</text>')
        out.append(f'<text x="{W / 2:.0f}" y="{T - 14}" text-anchor="middle" font-size="13">'
                   f'{escape(self.title)}</text>')
        out.append(f'<text x="{L + pw / 2:.0f}" y="{H - 12}" text-anchor="middle">{escape(self.xlabel)}</text>')
        out.append(f'<text transform="translate(16,{T + ph / 2:.0f}) rotate(-90)" text-anchor="middle">'
                   f'{escape(self.ylabel)}</text>')
        out.append("</svg>")
        return "\n".join(out)


def grid(figures, cols: int = 2) -> str:
    """Tile several figures into one SVG document."""
    rows = -(-len(figures) // cols)
    w = max(f.width for f in figures)
    h = max(f.height for f in figures)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w * cols}" height="{h * rows}">']
    for i, f in enumerate(figures):
        r, c = divmod(i, cols)
        body = f.render().split("\n", 1)[1].rsplit("\n", 1)[0]
        parts.append(f'<g transform="translate({c * w},{r * h})">{body}</g>')
    parts.append("</svg>")
    return "\n".join(parts)


def save(path, content: str) -> Path:
    path = Path(path)
    path.write_text(content)
    return path
