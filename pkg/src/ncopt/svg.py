"""Standalone SVG output: gap-vs-size charts and instance/heatmap views."""

from __future__ import annotations

from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def _doc(width: int, height: int, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">')
    return "\n".join(['<?xml version="1.0" encoding="UTF-8"?>', head,
                      f'<rect width="{width}" height="{height}" fill="white"/>', *body, "</svg>"]) + "\n"


def _nice_ticks(lo: float, hi: float, count: int = 5) -> np.ndarray:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / count
    mag = 10 ** np.floor(np.log10(raw))
    step = min((s * mag for s in (1, 2, 5, 10) if s * mag >= raw), default=10 * mag)
    return np.arange(np.floor(lo / step) * step, hi + step * 0.5, step)


def gap_plot(series: Sequence[tuple[str, Sequence[dict]]], title: str = "Optimality gap vs size",
             width: int = 640, height: int = 420) -> str:
    """Line chart of mean gap per size with shaded CI bands.

    ``series`` holds (label, records) pairs; each record needs ``n``,
    ``mean_gap``, ``ci_low`` and ``ci_high``.  A single-size series is drawn
    as a point with an error bar.
    """
    left, right, top, bottom = 60, 150, 40, 50
    pw, ph = width - left - right, height - top - bottom
    all_recs = [r for _, recs in series for r in recs]
    if not all_recs:
        raise ValueError("nothing to plot")
    ns = [r["n"] for r in all_recs]
    ys = [v for r in all_recs for v in (r["ci_low"], r["ci_high"], r["mean_gap"])]
    xlo, xhi = min(ns), max(ns)
    if xlo == xhi:
        xlo, xhi = xlo - 1, xhi + 1
    yt = _nice_ticks(min(0.0, min(ys)), max(ys))
    ylo, yhi = float(yt[0]), float(yt[-1])

    def sx(x):
        return left + (x - xlo) / (xhi - xlo) * pw

    def sy(y):
        return top + (1 - (y - ylo) / (yhi - ylo)) * ph

    body = [f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-family="sans-serif" '
            f'font-size="15">{escape(title)}</text>',
            f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
            f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for y in yt:
        body.append(f'<line x1="{left - 4}" y1="{sy(y):.1f}" x2="{left + pw}" y2="{sy(y):.1f}" '
                    f'stroke="#ddd"/>')
        body.append(f'<text x="{left - 8}" y="{sy(y) + 4:.1f}" text-anchor="end" font-family="sans-serif" '
                    f'font-size="11">{y:g}</text>')
    for n in sorted(set(ns)):
        body.append(f'<text x="{sx(n):.1f}" y="{top + ph + 18}" text-anchor="middle" '
                    f'font-family="sans-serif" font-size="11">{n}</text>')
    body.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle" '
                f'font-family="sans-serif" font-size="12">TSP size</text>')
    body.append(f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" font-family="sans-serif" '
                f'font-size="12" transform="rotate(-90 16 {top + ph / 2:.1f})">gap (%)</text>')
    for k, (label, recs) in enumerate(series):
        color = PALETTE[k % len(PALETTE)]
        recs = sorted(recs, key=lambda r: r["n"])
        if len(recs) > 1:
            upper = " ".join(f"{sx(r['n']):.1f},{sy(r['ci_high']):.1f}" for r in recs)
            lower = " ".join(f"{sx(r['n']):.1f},{sy(r['ci_low']):.1f}" for r in reversed(recs))
            body.append(f'<polygon points="{upper} {lower}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
            line = " ".join(f"{sx(r['n']):.1f},{sy(r['mean_gap']):.1f}" for r in recs)
            body.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="2"/>')
        for r in recs:
            x = sx(r["n"])
            body.append(f'<line x1="{x:.1f}" y1="{sy(r["ci_low"]):.1f}" x2="{x:.1f}" y2="{sy(r["ci_high"]):.1f}" '
                        f'stroke="{color}"/>')
            body.append(f'<circle cx="{x:.1f}" cy="{sy(r["mean_gap"]):.1f}" r="3.5" fill="{color}"/>')
        ly = top + 10 + 18 * k
        body.append(f'<rect x="{left + pw + 12}" y="{ly - 8}" width="12" height="12" fill="{color}"/>')
        body.append(f'<text x="{left + pw + 30}" y="{ly + 2}" font-family="sans-serif" '
                    f'font-size="12">{escape(label)}</text>')
    return _doc(width, height, body)


def tour_plot(coords: np.ndarray, reference: np.ndarray | None = None, predicted: np.ndarray | None = None,
              edge_probs: np.ndarray | None = None, title: str = "", size: int = 480) -> str:
    """Nodes, reference tour (green), predicted tour (red, dashed) and, for NAR
    models, every edge with opacity equal to its predicted probability (blue)."""
    coords = np.asarray(coords, dtype=np.float64)
    pad = 30
    span = size - 2 * pad

    def pt(i):
        x, y = coords[i]
        return pad + x * span, pad + (1 - y) * span

    body = []
    if title:
        body.append(f'<text x="{size / 2:.1f}" y="18" text-anchor="middle" font-family="sans-serif" '
                    f'font-size="14">{escape(title)}</text>')
    if edge_probs is not None:
        p = np.asarray(edge_probs, dtype=np.float64)
        n = len(coords)
        for i in range(n):
            for j in range(i + 1, n):
                w = max(p[i, j], p[j, i])
                if w > 1e-3:
                    (x1, y1), (x2, y2) = pt(i), pt(j)
                    body.append(f'<line class="heat" x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" '
                                f'stroke="#1f77b4" stroke-width="3" stroke-opacity="{min(w, 1.0):.4f}"/>')
    for tour, cls, style in ((reference, "reference", 'stroke="#2ca02c" stroke-width="2"'),
                             (predicted, "predicted", 'stroke="#d62728" stroke-width="1.5" stroke-dasharray="5,3"')):
        if tour is None:
            continue
        t = np.asarray(tour)
        for a, b in zip(t, np.roll(t, -1)):
            (x1, y1), (x2, y2) = pt(a), pt(b)
            body.append(f'<line class="{cls}" x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" '
                        f'{style} stroke-opacity="1"/>')
    for i in range(len(coords)):
        x, y = pt(i)
        body.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="4" fill="black"/>')
    return _doc(size, size, body)
