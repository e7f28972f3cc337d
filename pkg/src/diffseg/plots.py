"""Minimal SVG line plots, byte-deterministic for reproducible artifacts.

Only line, text, and polyline primitives are used, so the files stay small,
diffable, and viewable anywhere. No timestamps or randomness enter the
output: identical inputs give identical bytes.
"""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

from .errors import ConfigError, IoError

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")

_W, _H = 720, 420
_ML, _MR, _MT, _MB = 64, 160, 36, 48  # margins; right one leaves room for the legend


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10.0 ** np.floor(np.log10(raw))
    step = min(s * mag for s in (1, 2, 5, 10) if s * mag >= raw)
    first = np.ceil(lo / step) * step
    ticks = []
    v = first
    while v <= hi + 1e-9 * step:
        ticks.append(0.0 if abs(v) < 1e-12 * step else float(v))
        v += step
    return ticks


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def line_plot(curves, path, title: str = "", xlabel: str = "", ylabel: str = "") -> None:
    """Write an SVG with one polyline per (label, xs, ys) curve.

    Curves may have different lengths; axes are fitted to the joint range
    with a small padding. Labels appear in a legend, one color per curve.
    """
    curves = [(str(label), np.asarray(xs, dtype=float), np.asarray(ys, dtype=float))
              for label, xs, ys in curves]
    if not curves:
        raise ConfigError("nothing to plot")
    for label, xs, ys in curves:
        if xs.size != ys.size or xs.size < 1:
            raise ConfigError(f"curve {label!r} has mismatched or empty coordinates")
        if not (np.isfinite(xs).all() and np.isfinite(ys).all()):
            raise ConfigError(f"curve {label!r} contains non-finite values")

    x_lo = min(float(xs.min()) for _, xs, _ in curves)
    x_hi = max(float(xs.max()) for _, xs, _ in curves)
    y_lo = min(float(ys.min()) for _, _, ys in curves)
    y_hi = max(float(ys.max()) for _, _, ys in curves)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    pad = 0.05 * (y_hi - y_lo) or 1.0
    y_lo, y_hi = y_lo - pad, y_hi + pad

    def px(x: float) -> float:
        return _ML + (x - x_lo) / (x_hi - x_lo) * (_W - _ML - _MR)

    def py(y: float) -> float:
        return _H - _MB - (y - y_lo) / (y_hi - y_lo) * (_H - _MT - _MB)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="12">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
    ]
    if title:
        parts.append(
            f'<text x="{_W // 2}" y="20" text-anchor="middle" '
            f'font-size="15">{escape(title)}</text>'
        )

    axis = 'stroke="#333" stroke-width="1"'
    parts.append(f'<line x1="{_ML}" y1="{_H - _MB}" x2="{_W - _MR}" y2="{_H - _MB}" {axis}/>')
    parts.append(f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_H - _MB}" {axis}/>')

    for tx in _ticks(x_lo, x_hi):
        x = px(tx)
        parts.append(f'<line x1="{x:.2f}" y1="{_H - _MB}" x2="{x:.2f}" y2="{_H - _MB + 5}" {axis}/>')
        parts.append(
            f'<text x="{x:.2f}" y="{_H - _MB + 18}" text-anchor="middle">{_fmt(tx)}</text>'
        )
    for ty in _ticks(y_lo, y_hi):
        y = py(ty)
        parts.append(f'<line x1="{_ML - 5}" y1="{y:.2f}" x2="{_ML}" y2="{y:.2f}" {axis}/>')
        parts.append(
            f'<text x="{_ML - 8}" y="{y + 4:.2f}" text-anchor="end">{_fmt(ty)}</text>'
        )
    if xlabel:
        parts.append(
            f'<text x="{(_ML + _W - _MR) // 2}" y="{_H - 10}" '
            f'text-anchor="middle">{escape(xlabel)}</text>'
        )
    if ylabel:
        parts.append(
            f'<text x="16" y="{(_MT + _H - _MB) // 2}" text-anchor="middle" '
            f'transform="rotate(-90 16 {(_MT + _H - _MB) // 2})">{escape(ylabel)}</text>'
        )

    for i, (label, xs, ys) in enumerate(curves):
        color = PALETTE[i % len(PALETTE)]
        points = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
        parts.append(
            f'<polyline points="{points}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )
        ly = _MT + 16 + 18 * i
        lx = _W - _MR + 10
        parts.append(
            f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 22}" y2="{ly - 4}" '
            f'stroke="{color}" stroke-width="1.5"/>'
        )
        parts.append(f'<text x="{lx + 28}" y="{ly}">{escape(label)}</text>')

    parts.append("</svg>")
    try:
        with open(path, "w", newline="") as fh:
            fh.write("\n".join(parts) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write plot to {path}: {exc}") from exc
