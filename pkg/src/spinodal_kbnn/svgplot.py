"""Tiny SVG writers: line charts, parity scatters and grayscale image grids."""

from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def _svg(width, height, body) -> str:
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">\n'
        + "\n".join(body)
        + "\n</svg>\n"
    )


def _scale(lo, hi, a, b):
    span = hi - lo if hi > lo else 1.0
    return lambda v: a + (np.asarray(v, dtype=float) - lo) / span * (b - a)


def _axes(x0, y0, w, h, xlim, ylim, xlabel, ylabel, title):
    out = [
        f'<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="none" stroke="#333"/>',
        f'<text x="{x0 + w / 2}" y="{y0 + h + 28}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="{x0 - 42}" y="{y0 + h / 2}" text-anchor="middle" '
        f'transform="rotate(-90 {x0 - 42} {y0 + h / 2})">{escape(ylabel)}</text>',
        f'<text x="{x0 + w / 2}" y="{y0 - 8}" text-anchor="middle" font-weight="bold">{escape(title)}</text>',
    ]
    for frac in (0.0, 0.5, 1.0):
        xv = xlim[0] + frac * (xlim[1] - xlim[0])
        yv = ylim[0] + frac * (ylim[1] - ylim[0])
        out.append(f'<text x="{x0 + frac * w}" y="{y0 + h + 14}" text-anchor="middle">{xv:.3g}</text>')
        out.append(f'<text x="{x0 - 4}" y="{y0 + h - frac * h + 4}" text-anchor="end">{yv:.3g}</text>')
    return out


def line_chart(path, series: dict, xlabel="epoch", ylabel="loss", title="", log_y=True, width=520, height=360):
    """One polyline per named series of (x, y)."""
    pts = {k: (np.asarray(x, float), np.asarray(y, float)) for k, (x, y) in series.items() if len(x)}
    tf = (lambda v: np.log10(np.maximum(v, 1e-300))) if log_y else (lambda v: v)
    xs = np.concatenate([x for x, _ in pts.values()]) if pts else np.zeros(1)
    ys = np.concatenate([tf(y) for _, y in pts.values()]) if pts else np.zeros(1)
    ys = ys[np.isfinite(ys)] if np.isfinite(ys).any() else np.zeros(1)
    xlim, ylim = (xs.min(), xs.max()), (ys.min(), ys.max())
    x0, y0, w, h = 60, 30, width - 90, height - 80
    sx, sy = _scale(*xlim, x0, x0 + w), _scale(*ylim, y0 + h, y0)
    body = _axes(x0, y0, w, h, xlim, ylim, xlabel, f"log10 {ylabel}" if log_y else ylabel, title)
    for i, (name, (x, y)) in enumerate(pts.items()):
        color = PALETTE[i % len(PALETTE)]
        ty = tf(y)
        ok = np.isfinite(ty)
        coords = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(sx(x[ok]), sy(ty[ok])))
        body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        body.append(f'<text x="{x0 + w - 4}" y="{y0 + 14 + 14 * i}" text-anchor="end" fill="{color}">{escape(name)}</text>')
    Path(path).write_text(_svg(width, height, body))
    return Path(path)


def parity_plot(path, panels: dict, panel_size=260, cols=3):
    """Predicted vs actual, one panel (and one series) per quantity."""
    names = list(panels)
    rows = max(1, math.ceil(len(names) / cols))
    width, height = cols * panel_size, rows * panel_size
    body = []
    for i, name in enumerate(names):
        actual, pred = (np.asarray(v, float) for v in panels[name])
        lo = float(min(actual.min(), pred.min())) if len(actual) else 0.0
        hi = float(max(actual.max(), pred.max())) if len(actual) else 1.0
        x0 = (i % cols) * panel_size + 60
        y0 = (i // cols) * panel_size + 30
        s = panel_size - 90
        sx, sy = _scale(lo, hi, x0, x0 + s), _scale(lo, hi, y0 + s, y0)
        body += _axes(x0, y0, s, s, (lo, hi), (lo, hi), "actual", "predicted", name)
        body.append(f'<line x1="{x0}" y1="{y0 + s}" x2="{x0 + s}" y2="{y0}" stroke="#999" stroke-dasharray="4 3"/>')
        color = PALETTE[i % len(PALETTE)]
        dots = "".join(
            f'<circle cx="{a:.2f}" cy="{b:.2f}" r="1.6"/>' for a, b in zip(sx(actual), sy(pred))
        )
        body.append(f'<g class="series" data-name="{escape(name)}" fill="{color}" fill-opacity="0.6">{dots}</g>')
    Path(path).write_text(_svg(width, height, body))
    return Path(path)


def image_grid(path, images, titles=None, cell=3, cols=3):
    """Grayscale maps (each normalized to its own range) as a grid of pixel rects."""
    images = [np.asarray(im, float) for im in images]
    if not images:
        raise ValueError("no images to draw")
    h, w = images[0].shape
    rows = math.ceil(len(images) / cols)
    pw, ph = w * cell + 20, h * cell + 30
    body = []
    for k, im in enumerate(images):
        ox, oy = (k % cols) * pw + 10, (k // cols) * ph + 22
        lo, hi = float(im.min()), float(im.max())
        g = np.zeros_like(im) if hi <= lo else (im - lo) / (hi - lo)
        title = titles[k] if titles else f"filter {k + 1}"
        body.append(f'<text x="{ox}" y="{oy - 6}">{escape(title)}</text>')
        for r in range(h):
            for c in range(w):
                v = int(round(255 * g[r, c]))
                body.append(
                    f'<rect x="{ox + c * cell}" y="{oy + r * cell}" width="{cell}" height="{cell}" fill="rgb({v},{v},{v})"/>'
                )
    Path(path).write_text(_svg(cols * pw, rows * ph, body))
    return Path(path)


def write_pgm(path, image) -> Path:
    """Binary 8-bit PGM, linearly mapped from the image's own range."""
    im = np.asarray(image, float)
    lo, hi = float(im.min()), float(im.max())
    g = np.zeros(im.shape, np.uint8) if hi <= lo else np.round(255 * (im - lo) / (hi - lo)).astype(np.uint8)
    with Path(path).open("wb") as fh:
        fh.write(f"P5\n{im.shape[1]} {im.shape[0]}\n255\n".encode())
        fh.write(g.tobytes())
    return Path(path)
