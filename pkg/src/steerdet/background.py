"""Isotropic self-similar (ISS) Gaussian backgrounds and test-image blending."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import scipy.ndimage

from . import grid
from .grid import RasterGrid

DEFAULT_SCALES = (2, 4, 8, 16, 32)


@dataclass(frozen=True)
class BackgroundModel:
    """Power spectrum ``sigma2 / r**(2*gamma)`` driven by white noise of variance ``sigma2``."""

    gamma: float = 0.0
    sigma2: float = 1.0

    def __post_init__(self):
        if not self.gamma >= 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be > 0, got {self.sigma2}")

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma2)


@dataclass(frozen=True)
class GammaEstimate:
    gamma: float
    intercept: float
    scales: tuple
    log_variances: tuple
    residual: float


@dataclass(frozen=True)
class Placement:
    x: int
    y: int
    theta: float


PlacementList = list  # list[Placement]


# ------------------------------------------------------------------ synthesis

def synthesize_iss(width: int, height: int, bg: BackgroundModel, seed=None) -> RasterGrid:
    """Spectral synthesis of a zero-mean ISS field.

    The Hermitian white spectrum is the DFT of real white noise of variance
    ``sigma2`` (per-bin standard deviation ``sigma * sqrt(width*height)``); it is
    shaped by ``r**-gamma`` with the DC bin zeroed.
    """
    if width < 8 or height < 8:
        raise ValueError("ISS fields need at least 8x8 samples")
    rng = np.random.default_rng(seed)
    white = rng.standard_normal((height, width)) * bg.sigma
    r, _ = grid.polar_grid((height, width))
    shaping = np.zeros_like(r)
    nz = r > 0
    shaping[nz] = r[nz] ** (-bg.gamma)
    spec = grid.fft2(white, workers=1) * shaping
    return RasterGrid(grid.real_part(grid.ifft2(spec, workers=1)))


def _dc_check(F: np.ndarray, gamma: float) -> None:
    if gamma > 0 and abs(F[0, 0]) > 1e-9 * max(np.abs(F).max(), 1e-300):
        raise ValueError("filter must vanish at DC when gamma > 0")


def predict_variance(filter_spectrum, bg: BackgroundModel) -> float:
    """Variance of ``<S, f>`` for the filter with DFT ``filter_spectrum``.

    Discrete form of ``sigma2/(4 pi^2) * int |f^(w)|^2 / |w|^(2 gamma) dw``; the DC
    bin only enters for ``gamma == 0``.
    """
    F = np.asarray(filter_spectrum)
    _dc_check(F, bg.gamma)
    r, _ = grid.polar_grid(F.shape)
    p = np.abs(F) ** 2
    if bg.gamma == 0:
        total = p.sum()
    else:
        nz = r > 0
        total = np.sum(p[nz] * r[nz] ** (-2 * bg.gamma))
    return float(bg.sigma2 * total / F.size)


# ------------------------------------------------------------ gamma estimate

def mexican_hat_spectrum(shape, scale: float) -> np.ndarray:
    """DFT of ``a^-1 psi(x/a)`` with ``psi`` the negative Laplacian of a unit Gaussian."""
    r, _ = grid.polar_grid(shape)
    ar = scale * r
    return scale * ar ** 2 * np.exp(-0.5 * ar ** 2)


def _as_fields(field_or_fields) -> list[np.ndarray]:
    if isinstance(field_or_fields, (RasterGrid, np.ndarray)):
        return [np.asarray(field_or_fields, dtype=np.float64)]
    return [np.asarray(f, dtype=np.float64) for f in field_or_fields]


def estimate_gamma(field_or_fields, scales: Sequence[float] = DEFAULT_SCALES,
                   border: float = 2.0) -> GammaEstimate:
    """Estimate the self-similarity exponent from multiscale analyzer variances.

    For each scale ``a`` the field is correlated with an L1-normalized Mexican
    hat of width ``a`` and the empirical response variance is taken over
    positions at least ``border * a`` from the edges.  The slope of
    ``log Var`` against ``log a`` is ``2 * gamma``.  Several realizations may be
    passed; their variances are averaged per scale.
    """
    fields = _as_fields(field_or_fields)
    scales = sorted(float(a) for a in scales)
    if len(scales) < 3:
        raise ValueError("at least 3 scales are required")
    if scales[0] <= 0:
        raise ValueError("scales must be positive")
    for f in fields:
        if f.ndim != 2 or min(f.shape) < 8 * scales[-1]:
            raise ValueError(
                f"field {f.shape} too small for scale {scales[-1]} (needs >= {8 * scales[-1]:g} px)"
            )
    variances = np.zeros(len(scales))
    for f in fields:
        spec = grid.fft2(f, workers=1)
        for i, a in enumerate(scales):
            resp = grid.ifft2(spec * mexican_hat_spectrum(f.shape, a), workers=1).real
            m = int(math.ceil(border * a))
            inner = resp[m:f.shape[0] - m, m:f.shape[1] - m]
            if inner.size < 2:
                raise ValueError(f"no valid positions at scale {a:g} with border {border:g}")
            variances[i] += inner.var()
    variances /= len(fields)
    if np.any(variances <= 0):
        raise ArithmeticError("non-positive response variance; regression is ill-conditioned")
    x, y = np.log(scales), np.log(variances)
    A = np.vstack([x, np.ones_like(x)]).T
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = float(np.sqrt(np.mean((A @ np.array([slope, intercept]) - y) ** 2)))
    return GammaEstimate(float(slope / 2), float(intercept), tuple(scales), tuple(y), resid)


# ------------------------------------------------------------------ blending

def rotate_template(template, theta: float) -> np.ndarray:
    """Rotate by ``theta`` about the nominal center with cubic-spline interpolation.

    Returns ``T(R_{-theta} (x - c) + c)`` on a square canvas large enough to hold
    every rotation; its nominal center is the template's center.
    """
    t = np.asarray(template, dtype=np.float64)
    h, w = t.shape
    side = int(math.ceil(math.hypot(h, w))) + 2
    side += (side % 2 == 0)
    canvas = np.zeros((side, side))
    cy, cx = grid.center_index((h, w))
    C = (side - 1) // 2
    canvas[C - cy:C - cy + h, C - cx:C - cx + w] = t
    c, s = math.cos(theta), math.sin(theta)
    # output (y, x) -> input (y, x): x_in = c x + s y, y_in = -s x + c y (relative to center)
    M = np.array([[c, -s], [s, c]])
    offset = np.array([C, C]) - M @ np.array([C, C])
    return scipy.ndimage.affine_transform(canvas, M, offset=offset, order=3,
                                          mode="constant", cval=0.0, prefilter=True)


def _support_box(a: np.ndarray, rel: float = 1e-9):
    mask = np.abs(a) > rel * max(np.abs(a).max(), 1e-300)
    if not mask.any():
        return None
    rows, cols = np.nonzero(mask.any(axis=1))[0], np.nonzero(mask.any(axis=0))[0]
    return rows[0], rows[-1], cols[0], cols[-1]


def blend_templates(background, template, placements: Iterable[Placement],
                    amplitude: float = 1.0) -> RasterGrid:
    """Add rotated, translated copies of ``template`` onto ``background``."""
    out = np.array(background, dtype=np.float64)
    H, W = out.shape
    for p in placements:
        rot = rotate_template(template, p.theta)
        box = _support_box(rot)
        if box is None:
            continue
        r0, r1, c0, c1 = box
        C = (rot.shape[0] - 1) // 2
        top, left = p.y - C + r0, p.x - C + c0
        bottom, right = p.y - C + r1, p.x - C + c1
        if top < 0 or left < 0 or bottom >= H or right >= W:
            raise ValueError(f"placement ({p.x}, {p.y}) puts the template outside the {W}x{H} image")
        out[top:bottom + 1, left:right + 1] += amplitude * rot[r0:r1 + 1, c0:c1 + 1]
    return RasterGrid(out)


def template_extent(template) -> int:
    """Radius (pixels) of the disc around the center containing the template support."""
    t = np.asarray(template)
    cy, cx = grid.center_index(t.shape)
    ys, xs = np.nonzero(np.abs(t) > 1e-9 * max(np.abs(t).max(), 1e-300))
    if ys.size == 0:
        return 0
    return int(math.ceil(np.hypot(ys - cy, xs - cx).max())) + 3


def random_placements(count: int, width: int, height: int, extent: int,
                      min_spacing: float, seed=None, max_attempts: int = 100_000) -> list[Placement]:
    """Uniform integer positions at least ``min_spacing`` apart, uniform angles."""
    if count < 0:
        raise ValueError("count must be >= 0")
    lo_x, hi_x = extent, width - 1 - extent
    lo_y, hi_y = extent, height - 1 - extent
    if count and (hi_x < lo_x or hi_y < lo_y):
        raise ValueError(f"a template of extent {extent} does not fit in {width}x{height}")
    rng = np.random.default_rng(seed)
    out: list[Placement] = []
    attempts = 0
    while len(out) < count:
        attempts += 1
        if attempts > max_attempts:
            raise ValueError(
                f"could not pack {count} placements with spacing {min_spacing} "
                f"after {max_attempts} attempts (placed {len(out)})"
            )
        x = int(rng.integers(lo_x, hi_x + 1))
        y = int(rng.integers(lo_y, hi_y + 1))
        if any(math.hypot(x - q.x, y - q.y) < min_spacing for q in out):
            continue
        out.append(Placement(x, y, float(rng.uniform(0.0, 2 * math.pi))))
    return out


def write_placements(placements: Iterable[Placement], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "theta_rad"])
        for p in placements:
            w.writerow([p.x, p.y, repr(float(p.theta))])


def read_placements(path) -> list[Placement]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        return [Placement(int(r["x"]), int(r["y"]), float(r["theta_rad"])) for r in rows]
    except (KeyError, ValueError, TypeError) as exc:
        raise ValueError(f"{path}: malformed placement table ({exc!r})") from None
