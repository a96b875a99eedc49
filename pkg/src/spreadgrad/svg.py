"""Minimal self-contained SVG output: points, speed arrows and box sides."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .gradient_field import SpreadSummary
from .jump_detection import OUT, BoxTestResult, RayleighResult

WIDTH = 800
MARGIN = 40


class _Frame:
    """Maps km to pixels, y pointing up on the page."""

    def __init__(self, xy: np.ndarray, width: int = WIDTH, pad_km: float = 0.0):
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        if len(xy) == 0:
            xy = np.zeros((1, 2))
        lo = xy.min(axis=0) - pad_km
        hi = xy.max(axis=0) + pad_km
        span = np.maximum(hi - lo, 1e-9)
        self.scale = (width - 2 * MARGIN) / max(span[0], span[1])
        self.lo = lo
        self.width = width
        self.height = int(math.ceil(2 * MARGIN + span[1] * self.scale)) + 40

    def px(self, x: float, y: float) -> tuple[float, float]:
        return (MARGIN + (x - self.lo[0]) * self.scale,
                self.height - 40 - MARGIN - (y - self.lo[1]) * self.scale)


def _doc(frame: _Frame, body: list[str], title: str) -> str:
    head = (f'<?xml version="1.0" encoding="UTF-8"?>\n'
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{frame.width}" height="{frame.height}" '
            f'viewBox="0 0 {frame.width} {frame.height}">\n'
            f'<title>{escape(title)}</title>\n'
            f'<rect x="0" y="0" width="{frame.width}" height="{frame.height}" fill="white"/>\n')
    return head + "\n".join(body) + "\n</svg>\n"


def _f(v: float) -> str:
    return f"{v:.2f}"


def _arrow(x0, y0, x1, y1, color="#1f4e9c") -> str:
    ang = math.atan2(y1 - y0, x1 - x0)
    hl = 5.0
    a1 = (x1 - hl * math.cos(ang - 0.4), y1 - hl * math.sin(ang - 0.4))
    a2 = (x1 - hl * math.cos(ang + 0.4), y1 - hl * math.sin(ang + 0.4))
    return (f'<g class="arrow"><line x1="{_f(x0)}" y1="{_f(y0)}" x2="{_f(x1)}" y2="{_f(y1)}" '
            f'stroke="{color}" stroke-width="1.2"/>'
            f'<polygon points="{_f(x1)},{_f(y1)} {_f(a1[0])},{_f(a1[1])} {_f(a2[0])},{_f(a2[1])}" '
            f'fill="{color}"/></g>')


def spread_svg(summaries: Sequence[SpreadSummary], path, title: str = "Spread speed and direction",
               km_per_speed: float | None = None) -> int:
    """Quiver plot: one arrow per significant location, length proportional to speed.

    Returns the number of arrows drawn.
    """
    xy = np.array([[s.point.x, s.point.y] for s in summaries]).reshape(-1, 2)
    frame = _Frame(xy, pad_km=20.0)
    sig = [s for s in summaries if s.significant and s.speed_median and s.direction_mean]
    if km_per_speed is None:
        extent = float(np.ptp(xy, axis=0).max()) if len(xy) > 1 else 100.0
        top = max((s.speed_median for s in sig), default=1.0)
        km_per_speed = 0.06 * extent / top
    body = ['<g class="points">']
    for s in summaries:
        x, y = frame.px(s.point.x, s.point.y)
        body.append(f'<circle cx="{_f(x)}" cy="{_f(y)}" r="1.8" fill="#888888"/>')
    body.append("</g>")
    body.append('<g class="arrows">')
    for s in sig:
        L = s.speed_median * km_per_speed
        x0, y0 = frame.px(s.point.x, s.point.y)
        x1, y1 = frame.px(s.point.x + L * s.direction_mean[0], s.point.y + L * s.direction_mean[1])
        body.append(_arrow(x0, y0, x1, y1))
    body.append("</g>")
    # legend: an arrow for a round speed
    ref = max((s.speed_median for s in sig), default=10.0)
    ref = float(10 ** math.floor(math.log10(ref))) if ref > 0 else 10.0
    ly = frame.height - 20
    lx1 = MARGIN + ref * km_per_speed * frame.scale
    body.append('<g class="legend">' + _arrow(MARGIN, ly, lx1, ly, "#000000")
                + f'<text x="{_f(lx1 + 8)}" y="{_f(ly + 4)}" font-size="12" font-family="sans-serif">'
                f'{ref:g} km/year</text></g>')
    Path(path).write_text(_doc(frame, body, title), encoding="utf-8")
    return len(sig)


def jumps_svg(points: np.ndarray, boxes: Sequence[BoxTestResult], rayleigh: Sequence[RayleighResult],
              path, title: str = "Candidate long-range jumps") -> None:
    """Data points in grey, Rayleigh flags in black, significantly-out sides of flagged boxes in red."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    frame = _Frame(pts, pad_km=60.0)
    body = ['<g class="points">']
    for x, y in pts:
        px, py = frame.px(x, y)
        body.append(f'<circle cx="{_f(px)}" cy="{_f(py)}" r="1.8" fill="#aaaaaa"/>')
    body.append('</g>\n<g class="rayleigh">')
    for r in rayleigh:
        if r.flagged:
            px, py = frame.px(r.center.x, r.center.y)
            body.append(f'<circle cx="{_f(px)}" cy="{_f(py)}" r="3.5" fill="#000000"/>')
    body.append('</g>\n<g class="boxes">')
    for b in boxes:
        if not b.flagged:
            continue
        for side in b.sides:
            if side.classification != OUT:
                continue
            s = side.segment
            x0, y0 = frame.px(s.start.x, s.start.y)
            x1, y1 = frame.px(s.end.x, s.end.y)
            body.append(f'<line x1="{_f(x0)}" y1="{_f(y0)}" x2="{_f(x1)}" y2="{_f(y1)}" '
                        f'stroke="#d62728" stroke-width="1.5"/>')
    body.append("</g>")
    Path(path).write_text(_doc(frame, body, title), encoding="utf-8")
