"""Procedural shape images for desk-scale runs (no downloads needed).

Every class is a mirror-symmetric shape, so a horizontal flip never changes
the label. Colors, position, size and background vary per image.
"""

from __future__ import annotations

import numpy as np

CLASS_NAMES = ("disk", "square", "triangle", "ring", "plus", "cross", "hbar", "vbar",
               "diamond", "frame")


def _mask(kind: str, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    ady, adx = np.abs(dy), np.abs(dx)
    t = max(1.5, r * 0.35)
    if kind == "disk":
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == "square":
        return (ady <= r * 0.85) & (adx <= r * 0.85)
    if kind == "triangle":
        return (dy <= r * 0.8) & (dy >= -r) & (adx <= (dy + r) * 0.55)
    if kind == "ring":
        d2 = dy ** 2 + dx ** 2
        return (d2 <= r ** 2) & (d2 >= (r - t) ** 2)
    if kind == "plus":
        return ((ady <= t / 2 + 0.5) & (adx <= r)) | ((adx <= t / 2 + 0.5) & (ady <= r))
    if kind == "cross":
        return (np.abs(ady - adx) <= t / 2 + 0.5) & (ady <= r * 0.8)
    if kind == "hbar":
        return (ady <= t / 2 + 0.5) & (adx <= r)
    if kind == "vbar":
        return (adx <= t / 2 + 0.5) & (ady <= r)
    if kind == "diamond":
        return ady + adx <= r
    if kind == "frame":
        inner = r * 0.85 - t
        return (ady <= r * 0.85) & (adx <= r * 0.85) & ~((ady < inner) & (adx < inner))
    raise ValueError(kind)


def make_shapes(n: int, size: int = 32, seed: int = 0, num_classes: int = 10,
                noise: float = 4.0):
    """Return ``(images uint8 (n, size, size, 3), labels int64 (n,))``."""
    if not 1 <= num_classes <= len(CLASS_NAMES):
        raise ValueError(f"num_classes must be in [1, {len(CLASS_NAMES)}]")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    images = np.empty((n, size, size, 3), dtype=np.uint8)
    labels = rng.integers(0, num_classes, size=n)
    for i in range(n):
        # dark background, bright foreground: colour varies but never swaps roles
        bg = rng.uniform(0, 90, size=3)
        fg = rng.uniform(165, 255, size=3)
        r = rng.uniform(0.2, 0.36) * size
        cy = rng.uniform(r, size - r)
        cx = rng.uniform(r, size - r)
        m = _mask(CLASS_NAMES[labels[i]], yy, xx, cy, cx, r)
        img = np.where(m[..., None], fg, bg) + rng.normal(0, noise, size=(size, size, 3))
        images[i] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return images, labels.astype(np.int64)
