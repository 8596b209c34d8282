"""Synthetic templates used by the experiments and tests."""
from __future__ import annotations

import numpy as np
import scipy.ndimage

from . import grid


def gaussian_bump(size: int = 64, width: float = 6.0) -> np.ndarray:
    cy, cx = grid.center_index((size, size))
    y, x = np.mgrid[:size, :size]
    return np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * width ** 2))


def two_blob(size: int = 200, separation: float = 24.0, width: float = 5.0,
             angle: float = 0.0) -> np.ndarray:
    """Two equal Gaussian blobs symmetric about the center (double-helix-like)."""
    cy, cx = grid.center_index((size, size))
    y, x = np.mgrid[:size, :size].astype(np.float64)
    dx, dy = 0.5 * separation * np.cos(angle), 0.5 * separation * np.sin(angle)
    out = np.zeros((size, size))
    for s in (1, -1):
        out += np.exp(-((x - cx - s * dx) ** 2 + (y - cy - s * dy) ** 2) / (2 * width ** 2))
    return out


def hand_drawn_three(size: int = 200, stroke: float = 3.0) -> np.ndarray:
    """A digit "3" drawn as two open arcs and smoothed like a pen stroke."""
    c = (size - 1) // 2
    scale = size / 200.0
    img = np.zeros((size, size))
    t = np.linspace(0, 1, 4000)
    arcs = [
        # (center_x, center_y, radius, start, end) in a y-down frame
        (c + 2 * scale, c - 24 * scale, 24 * scale, -0.80 * np.pi, 0.50 * np.pi),
        (c + 4 * scale, c + 22 * scale, 28 * scale, -0.50 * np.pi, 0.85 * np.pi),
    ]
    for ax, ay, rad, a0, a1 in arcs:
        ang = a0 + (a1 - a0) * t
        xs = np.round(ax + rad * np.cos(ang)).astype(int)
        ys = np.round(ay + rad * np.sin(ang)).astype(int)
        img[ys, xs] = 1.0
    # short cross stroke joining the two arcs
    xs = np.arange(int(c - 8 * scale), int(c + 6 * scale))
    img[c, xs] = 1.0
    img = scipy.ndimage.gaussian_filter(img, stroke)
    return img / img.max()


def sharp_pair(size: int = 32) -> np.ndarray:
    """Two pixel-scale blobs 10 px apart, the evaluation fixture's pattern."""
    return two_blob(size, separation=10.0, width=1.0)


BUILTIN = {
    "two-blob": two_blob,
    "sharp-pair": sharp_pair,
    "three": hand_drawn_three,
    "bump": gaussian_bump,
}
