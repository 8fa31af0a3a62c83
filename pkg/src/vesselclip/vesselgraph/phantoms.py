"""Canonical binary test shapes with known graph structure."""
import math

import numpy as np


def stroke(mask, p0, p1, half_width=0.5):
    """Burn a straight segment of the given half-width into ``mask`` in place.

    ``p0``/``p1`` are (x, y).  A pixel is set when its centre lies within
    ``half_width`` of the segment; half-width 0.5 gives a 1-pixel line.
    """
    h, w = mask.shape
    (x0, y0), (x1, y1) = p0, p1
    pad = int(math.ceil(half_width)) + 1
    xa, xb = max(int(min(x0, x1)) - pad, 0), min(int(max(x0, x1)) + pad + 1, w)
    ya, yb = max(int(min(y0, y1)) - pad, 0), min(int(max(y0, y1)) + pad + 1, h)
    if xa >= xb or ya >= yb:
        return mask
    yy, xx = np.mgrid[ya:yb, xa:xb]
    dx, dy = x1 - x0, y1 - y0
    seg2 = dx * dx + dy * dy
    t = np.zeros(xx.shape) if seg2 == 0 else np.clip(((xx - x0) * dx + (yy - y0) * dy) / seg2, 0, 1)
    d2 = (xx - (x0 + t * dx)) ** 2 + (yy - (y0 + t * dy)) ** 2
    mask[ya:yb, xa:xb] |= d2 <= half_width * half_width
    return mask


def stroke_many(mask, segments):
    """Burn many segments at once; ``segments`` rows are (x0, y0, x1, y1, half_width).

    Same pixel rule as :func:`stroke`, vectorised over a fixed window per segment.
    """
    seg = np.asarray(segments, dtype=np.float64).reshape(-1, 5)
    if not len(seg):
        return mask
    h, w = mask.shape
    x0, y0, x1, y1, hw = seg.T
    pad = np.ceil(hw).astype(int) + 1
    xa = np.floor(np.minimum(x0, x1)).astype(int) - pad
    ya = np.floor(np.minimum(y0, y1)).astype(int) - pad
    span = int(np.max(np.maximum(np.abs(x1 - x0), np.abs(y1 - y0)) + 2 * pad)) + 2
    off = np.arange(span)
    xx = xa[:, None, None] + off[None, None, :]
    yy = ya[:, None, None] + off[None, :, None]
    dx, dy = (x1 - x0)[:, None, None], (y1 - y0)[:, None, None]
    seg2 = dx * dx + dy * dy
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(seg2 > 0, ((xx - x0[:, None, None]) * dx + (yy - y0[:, None, None]) * dy) / seg2, 0.0)
    t = np.clip(t, 0, 1)
    d2 = (xx - (x0[:, None, None] + t * dx)) ** 2 + (yy - (y0[:, None, None] + t * dy)) ** 2
    hit = (d2 <= (hw * hw)[:, None, None]) & (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
    mask[np.broadcast_to(yy, hit.shape)[hit], np.broadcast_to(xx, hit.shape)[hit]] = True
    return mask


def line(length=40, size=64):
    m = np.zeros((size, size), bool)
    y = size // 2
    m[y, 10 : 10 + length] = True
    return m


def bar(length=40, width=3, size=64):
    m = np.zeros((size, size), bool)
    y = size // 2 - width // 2
    m[y : y + width, 10 : 10 + length] = True
    return m


def star(k, arm=25, size=80, half_width=0.5):
    """k straight spokes meeting at the image centre."""
    m = np.zeros((size, size), bool)
    c = size / 2
    for i in range(k):
        a = 2 * math.pi * i / k + 0.3
        stroke(m, (c, c), (c + arm * math.cos(a), c + arm * math.sin(a)), half_width)
    return m


def y_junction(size=64):
    return star(3, arm=20, size=size)


def ring(radius=20, thickness=3, size=64):
    yy, xx = np.mgrid[:size, :size]
    d = np.hypot(yy - size / 2, xx - size / 2)
    return np.abs(d - radius) <= thickness / 2


def disk(radius=20, size=64):
    yy, xx = np.mgrid[:size, :size]
    return np.hypot(yy - size // 2, xx - size // 2) <= radius


def semicircle(radius=100, half_width=1.5):
    size = 2 * radius + 30
    c = size // 2
    yy, xx = np.mgrid[:size, :size]
    d = np.hypot(yy - c, xx - c)
    return (np.abs(d - radius) <= half_width) & (yy <= c)
