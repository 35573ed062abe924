"""Self-contained SVG charts from numeric series.

Deterministic string output, no external assets, no plotting dependency.
Two chart kinds cover everything the experiment harness emits: line charts
(optionally with shaded error bands) and equal-aspect region diagrams for
planar paths with diamond level sets.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import InvalidParameterError

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
BAND_ALPHA = "0.25"
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 58, 16, 34, 44


def _fmt(v: float) -> str:
    """Compact coordinate formatting; 0.01 px grid keeps files small."""
    return f"{v:.2f}".rstrip("0").rstrip(".")


def _nice_ticks(lo: float, hi: float, target: int = 5):
    """Tick positions on the 1-2-5 ladder covering [lo, hi]."""
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise InvalidParameterError("axis limits must be finite")
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / max(target, 1)
    mag = 10.0 ** math.floor(math.log10(raw))
    for m in (1.0, 2.0, 5.0, 10.0):
        if raw <= m * mag:
            step = m * mag
            break
    first = math.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + 1e-9 * step:
        ticks.append(0.0 if abs(t) < 1e-12 * step else t)
        t += step
    return ticks


def _tick_label(v: float) -> str:
    s = f"{v:.6g}"
    return s


class _Frame:
    """Affine map from data coordinates to the pixel plot box."""

    def __init__(self, xlim, ylim, width, height):
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        self.px0 = MARGIN_L
        self.px1 = width - MARGIN_R
        self.py0 = height - MARGIN_B
        self.py1 = MARGIN_T
        if self.x1 <= self.x0:
            self.x1 = self.x0 + 1.0
        if self.y1 <= self.y0:
            self.y1 = self.y0 + 1.0

    def x(self, v):
        return self.px0 + (v - self.x0) / (self.x1 - self.x0) * (self.px1 - self.px0)

    def y(self, v):
        return self.py0 + (v - self.y0) / (self.y1 - self.y0) * (self.py1 - self.py0)


def _polyline(frame, xs, ys, color, width="1.5", dash=None):
    pts = " ".join(f"{_fmt(frame.x(a))},{_fmt(frame.y(b))}" for a, b in zip(xs, ys))
    extra = f' stroke-dasharray="{dash}"' if dash else ""
    return (
        f'<polyline fill="none" stroke="{color}" stroke-width="{width}"'
        f'{extra} points="{pts}"/>'
    )


def _axes(frame, title, xlabel, ylabel, width, height):
    parts = [
        f'<rect x="{frame.px0}" y="{frame.py1}" width="{frame.px1 - frame.px0}"'
        f' height="{frame.py0 - frame.py1}" fill="none" stroke="#333333"/>'
    ]
    for t in _nice_ticks(frame.x0, frame.x1):
        px = frame.x(t)
        parts.append(
            f'<line x1="{_fmt(px)}" y1="{frame.py0}" x2="{_fmt(px)}"'
            f' y2="{frame.py0 + 4}" stroke="#333333"/>'
        )
        parts.append(
            f'<text x="{_fmt(px)}" y="{frame.py0 + 17}" text-anchor="middle"'
            f' font-size="11">{_tick_label(t)}</text>'
        )
    for t in _nice_ticks(frame.y0, frame.y1):
        py = frame.y(t)
        parts.append(
            f'<line x1="{frame.px0 - 4}" y1="{_fmt(py)}" x2="{frame.px0}"'
            f' y2="{_fmt(py)}" stroke="#333333"/>'
        )
        parts.append(
            f'<text x="{frame.px0 - 7}" y="{_fmt(py + 3.5)}" text-anchor="end"'
            f' font-size="11">{_tick_label(t)}</text>'
        )
    cx = (frame.px0 + frame.px1) / 2
    parts.append(
        f'<text x="{_fmt(cx)}" y="20" text-anchor="middle" font-size="14"'
        f' font-weight="bold">{title}</text>'
    )
    parts.append(
        f'<text x="{_fmt(cx)}" y="{height - 8}" text-anchor="middle"'
        f' font-size="12">{xlabel}</text>'
    )
    parts.append(
        f'<text x="14" y="{_fmt((frame.py0 + frame.py1) / 2)}" text-anchor="middle"'
        f' font-size="12" transform="rotate(-90 14 '
        f'{_fmt((frame.py0 + frame.py1) / 2)})">{ylabel}</text>'
    )
    return parts


def _legend(names, width):
    parts = []
    y = MARGIN_T + 6
    for i, name in enumerate(names):
        color = PALETTE[i % len(PALETTE)]
        parts.append(
            f'<line x1="{width - MARGIN_R - 130}" y1="{y + 10 + 16 * i}"'
            f' x2="{width - MARGIN_R - 108}" y2="{y + 10 + 16 * i}"'
            f' stroke="{color}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{width - MARGIN_R - 102}" y="{y + 14 + 16 * i}"'
            f' font-size="11">{name}</text>'
        )
    return parts


def line_chart(
    series,
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    bands=None,
    width: int = 640,
    height: int = 420,
    legend: bool = True,
) -> str:
    """Render labeled (name, xs, ys) series as one SVG document string.

    bands, when given, is a list of (xs, lo, hi) shaded regions drawn
    underneath the lines (one per series color, used for error bands).
    """
    if not series:
        raise InvalidParameterError("need at least one series")
    cleaned = []
    for name, xs, ys in series:
        xs = np.asarray(xs, dtype=float)
        ys = np.asarray(ys, dtype=float)
        if xs.size != ys.size or xs.size < 1:
            raise InvalidParameterError(f"series {name!r} needs equal-size x and y")
        cleaned.append((str(name), xs, ys))
    all_x = np.concatenate([c[1] for c in cleaned])
    all_y = np.concatenate([c[2] for c in cleaned])
    if bands:
        for xs, lo, hi in bands:
            all_y = np.concatenate([all_y, np.asarray(lo, float), np.asarray(hi, float)])
    pad = 0.05 * (all_y.max() - all_y.min() + 1e-12)
    frame = _Frame(
        (float(all_x.min()), float(all_x.max())),
        (float(all_y.min()) - pad, float(all_y.max()) + pad),
        width,
        height,
    )
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}"'
        f' viewBox="0 0 {width} {height}" font-family="sans-serif">',
        f'<rect width="{width}" height="{height}" fill="#ffffff"/>',
    ]
    parts += _axes(frame, title, xlabel, ylabel, width, height)
    if bands:
        for i, (xs, lo, hi) in enumerate(bands):
            xs = np.asarray(xs, float)
            lo = np.asarray(lo, float)
            hi = np.asarray(hi, float)
            fwd = [f"{_fmt(frame.x(a))},{_fmt(frame.y(b))}" for a, b in zip(xs, hi)]
            back = [
                f"{_fmt(frame.x(a))},{_fmt(frame.y(b))}"
                for a, b in zip(xs[::-1], lo[::-1])
            ]
            color = PALETTE[i % len(PALETTE)]
            parts.append(
                f'<polygon fill="{color}" fill-opacity="{BAND_ALPHA}" stroke="none"'
                f' points="{" ".join(fwd + back)}"/>'
            )
    for i, (name, xs, ys) in enumerate(cleaned):
        parts.append(_polyline(frame, xs, ys, PALETTE[i % len(PALETTE)]))
    if legend and len(cleaned) > 1:
        parts += _legend([c[0] for c in cleaned], width)
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def region_chart(
    paths,
    levels=(),
    title: str = "",
    width: int = 480,
    height: int = 480,
) -> str:
    """Equal-aspect planar diagram: (name, x, y) paths plus diamond levels.

    Each value r in levels draws the square |x| + |y| = r as a dashed
    outline, which is the level set the planar diffusion moves along.
    Start and end of each path get a marker.
    """
    if not paths:
        raise InvalidParameterError("need at least one path")
    cleaned = []
    for name, xs, ys in paths:
        xs = np.asarray(xs, dtype=float)
        ys = np.asarray(ys, dtype=float)
        if xs.size != ys.size or xs.size < 1:
            raise InvalidParameterError(f"path {name!r} needs equal-size x and y")
        cleaned.append((str(name), xs, ys))
    biggest = max(
        max(float(np.abs(c[1]).max()), float(np.abs(c[2]).max())) for c in cleaned
    )
    if levels:
        biggest = max(biggest, max(levels))
    lim = 1.1 * biggest + 1e-9
    frame = _Frame((-lim, lim), (-lim, lim), width, height)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}"'
        f' viewBox="0 0 {width} {height}" font-family="sans-serif">',
        f'<rect width="{width}" height="{height}" fill="#ffffff"/>',
    ]
    parts += _axes(frame, title, "x", "y", width, height)
    for ax in (0.0,):
        parts.append(_polyline(frame, [-lim, lim], [ax, ax], "#bbbbbb", "1"))
        parts.append(_polyline(frame, [ax, ax], [-lim, lim], "#bbbbbb", "1"))
    for r in levels:
        parts.append(
            _polyline(
                frame,
                [r, 0.0, -r, 0.0, r],
                [0.0, r, 0.0, -r, 0.0],
                "#888888",
                "1",
                dash="5,4",
            )
        )
    for i, (name, xs, ys) in enumerate(cleaned):
        color = PALETTE[i % len(PALETTE)]
        parts.append(_polyline(frame, xs, ys, color, "1.2"))
        parts.append(
            f'<circle cx="{_fmt(frame.x(xs[0]))}" cy="{_fmt(frame.y(ys[0]))}" r="3.5"'
            f' fill="{color}"/>'
        )
        parts.append(
            f'<rect x="{_fmt(frame.x(xs[-1]) - 3)}" y="{_fmt(frame.y(ys[-1]) - 3)}"'
            f' width="6" height="6" fill="{color}"/>'
        )
    if len(cleaned) > 1:
        parts += _legend([c[0] for c in cleaned], width)
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
