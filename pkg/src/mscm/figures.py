"""Minimal SVG output: sampling trajectories as polylines, time running 1 -> 0 left to right."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

PANEL_W, PANEL_H, MARGIN = 240, 200, 30
COLOURS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def trajectory_svg(panels, header_comment: str | None = None, y_range=None) -> str:
    """``panels`` is a list of ``(title, times, states)`` with ``states`` shaped (steps + 1, n, d).

    Only the first latent dimension is drawn.
    """
    if not panels:
        raise ValueError("need at least one panel")
    if y_range is None:
        lo = min(float(np.min(np.asarray(st)[..., 0])) for _, _, st in panels)
        hi = max(float(np.max(np.asarray(st)[..., 0])) for _, _, st in panels)
        pad = 0.05 * (hi - lo or 1.0)
        y_range = (lo - pad, hi + pad)
    y_lo, y_hi = y_range
    width = len(panels) * (PANEL_W + MARGIN) + MARGIN
    height = PANEL_H + 2 * MARGIN
    out = []
    if header_comment:
        out.append(f"<!-- {escape(header_comment)} -->")
    out.append(f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">')
    out.append(f'<rect width="{width}" height="{height}" fill="white"/>')
    for p, (title, times, states) in enumerate(panels):
        x0 = MARGIN + p * (PANEL_W + MARGIN)
        y0 = MARGIN
        out.append(f'<g transform="translate({x0},{y0})">')
        out.append(f'<rect width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#444" stroke-width="1"/>')
        out.append(f'<text x="{PANEL_W / 2}" y="-8" font-size="12" text-anchor="middle" font-family="sans-serif">{escape(title)}</text>')
        times = np.asarray(times, dtype=float)
        states = np.asarray(states, dtype=float)
        px = (1.0 - times) * PANEL_W
        for i in range(states.shape[1]):
            py = (y_hi - states[:, i, 0]) / (y_hi - y_lo) * PANEL_H
            pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
            colour = COLOURS[i % len(COLOURS)]
            out.append(f'<polyline points="{pts}" fill="none" stroke="{colour}" stroke-width="0.8" stroke-opacity="0.6"/>')
        out.append(f'<text x="0" y="{PANEL_H + 14}" font-size="10" font-family="sans-serif">t=1</text>')
        out.append(f'<text x="{PANEL_W}" y="{PANEL_H + 14}" font-size="10" text-anchor="end" font-family="sans-serif">t=0</text>')
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
