"""FFT correlation with a steerable detector, orientation steering and NMS.

The response to the detector rotated by ``alpha`` is

    R(x, alpha) = Re sum_n e^{j n alpha} u_n(x),   u_n = IFFT(I^ conj(F_n)),

where ``F_n = r**(2 gamma) P_n(r) e^{j n theta}``.  Rotating the filter by
``alpha`` multiplies its harmonic ``n`` by ``e^{-j n alpha}``, which is what makes
``alpha`` line up with the angle at which a template was blended in.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import scipy.ndimage

from . import grid
from .grid import RasterGrid
from .harmonics import SteerableDetector, harmonic_spectra

STEER_BLOCK_PIXELS = 1 << 16


@dataclass
class BasisResponses:
    """Per-harmonic complex response maps.

    With ``symmetric`` only ``n >= 0`` are stored and ``u_{-n} = conj(u_n)``.
    """

    maps: dict
    n_max: int
    symmetric: bool
    shape: tuple

    def __getitem__(self, n: int) -> np.ndarray:
        if n in self.maps:
            return self.maps[n]
        if self.symmetric and -n in self.maps:
            return np.conj(self.maps[-n])
        raise KeyError(n)

    @property
    def harmonics(self) -> np.ndarray:
        return np.arange(-self.n_max, self.n_max + 1)

    def at(self, y: int, x: int) -> np.ndarray:
        """``u_n(x)`` for every harmonic, ordered ``-N..N``."""
        return np.array([self[int(n)][y, x] for n in self.harmonics])


@dataclass
class ResponseMaps:
    amp: RasterGrid
    ang: RasterGrid
    M: int
    symmetry: int = 1


@dataclass(frozen=True)
class Detection:
    x: int
    y: int
    angle: float
    score: float


def basis_responses(image, det: SteerableDetector, boundary: str = "periodic",
                    symmetric: bool | None = None, workers: int | None = None) -> BasisResponses:
    """Correlate ``image`` with every harmonic component of ``det``.

    ``boundary="zero"`` pads the image with zeros by the template extent before
    the (otherwise periodic) spectral correlation and crops the result.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("image must be 2-D")
    th, tw = det.source_shape
    if img.shape[0] < th or img.shape[1] < tw:
        raise ValueError(f"image {img.shape[1]}x{img.shape[0]} is smaller than the "
                         f"detector's {tw}x{th} template")
    if boundary not in ("periodic", "zero"):
        raise ValueError(f"unknown boundary mode {boundary!r}")
    if symmetric is None:
        symmetric = det.is_real
    h, w = img.shape
    pad = 0
    if boundary == "zero":
        pad = max(th, tw) // 2 + 1
        img = np.pad(img, pad)
    spec = grid.fft2(img, workers)
    ns = range(0, det.n_max + 1) if symmetric else det.harmonics.members
    maps = {}
    for n, Fn in harmonic_spectra(det, img.shape, ns):
        u = grid.ifft2(spec * np.conj(Fn), workers)
        if n == 0:
            u = u.real.astype(np.complex128)
        maps[n] = u[pad:pad + h, pad:pad + w] if pad else u
    return BasisResponses(maps, det.n_max, symmetric, (h, w))


def _stack(basis: BasisResponses):
    """Real design matrix rows and the harmonic/part each row stands for."""
    if basis.symmetric:
        rows = [(0, "re", 1.0)]
        for n in range(1, basis.n_max + 1):
            rows += [(n, "re", 2.0), (n, "im", 2.0)]
    else:
        rows = []
        for n in basis.harmonics:
            rows += [(int(n), "re", 1.0), (int(n), "im", 1.0)]
    return rows


def steering_weights(basis: BasisResponses, alphas) -> np.ndarray:
    """``W`` such that ``R(., alpha_m) = W[m] @ stack``; see :func:`_stack`."""
    alphas = np.asarray(alphas, dtype=np.float64)
    rows = _stack(basis)
    W = np.empty((alphas.size, len(rows)))
    for j, (n, part, mult) in enumerate(rows):
        # Re(e^{j n a} u) = cos(n a) Re u - sin(n a) Im u
        W[:, j] = mult * (np.cos(n * alphas) if part == "re" else -np.sin(n * alphas))
    return W


def _stacked_rows(basis: BasisResponses, r0: int, r1: int) -> np.ndarray:
    rows = _stack(basis)
    out = np.empty((len(rows), (r1 - r0) * basis.shape[1]))
    for j, (n, part, _) in enumerate(rows):
        u = basis.maps[n][r0:r1] if n in basis.maps else basis[n][r0:r1]
        out[j] = (u.real if part == "re" else u.imag).ravel()
    return out


def response(basis: BasisResponses, alpha: float) -> np.ndarray:
    """``Re sum_n e^{j n alpha} u_n`` over the whole image."""
    total = np.zeros(basis.shape)
    for n in basis.harmonics:
        total += np.real(np.exp(1j * n * alpha) * basis[int(n)])
    return total


def steer(basis: BasisResponses, M: int, symmetry: int = 1) -> ResponseMaps:
    """Maximum response over the angles ``2 pi m / M`` and the maximizing angle.

    Ties go to the smaller angle.  ``ang`` is reported modulo ``2 pi / symmetry``.
    """
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    if symmetry < 1:
        raise ValueError(f"symmetry order must be >= 1, got {symmetry}")
    alphas = 2 * np.pi * np.arange(M) / M
    W = steering_weights(basis, alphas)
    h, w = basis.shape
    amp = np.empty((h, w))
    idx = np.empty((h, w), dtype=np.int64)
    step = max(1, STEER_BLOCK_PIXELS // w)
    for r0 in range(0, h, step):
        r1 = min(h, r0 + step)
        R = W @ _stacked_rows(basis, r0, r1)
        best = np.argmax(R, axis=0)
        idx[r0:r1] = best.reshape(r1 - r0, w)
        amp[r0:r1] = np.take_along_axis(R, best[None], axis=0).reshape(r1 - r0, w)
    ang = np.mod(alphas[idx], 2 * np.pi / symmetry)
    return ResponseMaps(RasterGrid(amp), RasterGrid(ang), M, symmetry)


def refine_angle(basis: BasisResponses, x: int, y: int, alpha0: float, M: int) -> float:
    """One arctangent-form Newton step towards the maximizing angle at pixel ``(x, y)``.

    The step is exact for a single harmonic, is clamped to ``pi / M`` and is
    skipped when the response is not locally concave at ``alpha0``.
    """
    n = basis.harmonics.astype(np.float64)
    z = np.exp(1j * n * alpha0) * basis.at(y, x)
    R = float(np.real(z.sum()))
    d1 = float(np.real((1j * n * z).sum()))
    d2 = float(np.real((-(n ** 2) * z).sum()))
    if not d2 < 0 or not R > 0:
        return alpha0
    # for R = A cos(k (a - a*)), sqrt(-R''/R) = k and the step below lands on a*
    k = math.sqrt(-d2 / R)
    step = math.atan(k * d1 / -d2) / k
    lim = math.pi / M
    return float(np.mod(alpha0 + min(max(step, -lim), lim), 2 * np.pi))


def nms_detect(maps: ResponseMaps, threshold: float = -math.inf, min_distance: float = 0.0,
               max_detections: int | None = None, basis: BasisResponses | None = None,
               refine: bool = False) -> list[Detection]:
    """Greedy selection of 3x3 local maxima of ``amp`` in descending score.

    A candidate is accepted when it is at least ``min_distance`` from every
    accepted detection; the scan stops at the first score below ``threshold``.
    """
    if not min_distance >= 0:
        raise ValueError("min_distance must be >= 0")
    if refine and basis is None:
        raise ValueError("angle refinement needs the basis responses")
    amp = np.asarray(maps.amp)
    ang = np.asarray(maps.ang)
    peaks = amp >= scipy.ndimage.maximum_filter(amp, size=3, mode="nearest")
    peaks &= amp >= threshold
    ys, xs = np.nonzero(peaks)
    scores = amp[ys, xs]
    order = np.lexsort((xs, ys, -scores))
    cell = max(float(min_distance), 1.0)
    buckets: dict = {}
    out: list[Detection] = []
    for i in order:
        if max_detections is not None and len(out) >= max_detections:
            break
        x, y = int(xs[i]), int(ys[i])
        if min_distance > 0:
            bx, by = int(x // cell), int(y // cell)
            clash = False
            for gx in (bx - 1, bx, bx + 1):
                for gy in (by - 1, by, by + 1):
                    for (qx, qy) in buckets.get((gx, gy), ()):
                        if math.hypot(x - qx, y - qy) < min_distance:
                            clash = True
                            break
                    if clash:
                        break
                if clash:
                    break
            if clash:
                continue
            buckets.setdefault((bx, by), []).append((x, y))
        a = float(ang[y, x])
        if refine:
            a = float(np.mod(refine_angle(basis, x, y, a, maps.M), 2 * np.pi / maps.symmetry))
        out.append(Detection(x, y, a, float(scores[i])))
    return out


def default_min_distance(det: SteerableDetector) -> float:
    """Half the diameter of a disc holding the template, a safe default separation."""
    return float(max(det.source_shape) // 2)


def write_detections(detections, path) -> None:
    rows = sorted(detections, key=lambda d: -d.score)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "theta_rad", "score"])
        for d in rows:
            w.writerow([d.x, d.y, repr(float(d.angle)), repr(float(d.score))])


def read_detections(path) -> list[Detection]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        return [Detection(int(r["x"]), int(r["y"]), float(r["theta_rad"]), float(r["score"]))
                for r in rows]
    except (KeyError, ValueError, TypeError) as exc:
        raise ValueError(f"{path}: malformed detection table ({exc!r})") from None


def detect(image, det: SteerableDetector, M: int = 30, threshold: float = -math.inf,
           min_distance: float | None = None, max_detections: int | None = None,
           symmetry: int = 1, refine: bool = False, boundary: str = "periodic",
           workers: int | None = None):
    """Full pipeline: basis responses, steering and NMS.  Returns ``(maps, detections)``."""
    basis = basis_responses(image, det, boundary=boundary, workers=workers)
    maps = steer(basis, M, symmetry)
    md = default_min_distance(det) if min_distance is None else min_distance
    dets = nms_detect(maps, threshold, md, max_detections, basis=basis, refine=refine)
    return maps, dets
