"""Design of SNR-optimal steerable detectors from a single template.

A detector is stored as B-spline coefficients ``c_n[k]`` of the Fourier radial
profiles for harmonics ``n = -N..N``; its spectrum is

    f^(r, theta) = r**(2 gamma) * sum_n sum_k c_n[k] (1/r0) beta2(r/r0 - k) e^{j n theta}.

Inner products between the template spectrum and the atoms are Riemann sums
over the DFT grid of the zero-padded template.
"""
from __future__ import annotations

import dataclasses
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse

from . import __version__, bspline, grid
from .background import BackgroundModel, predict_variance
from .grid import RasterGrid, SpectralGrid

FORMAT_VERSION = 1
MIN_ANNULUS_BINS = 8
ANGULAR_SAMPLES = 4.0


class UnderResolvedWarning(UserWarning):
    """Too few DFT bins fall inside some atoms' annuli."""


@dataclass(frozen=True)
class HarmonicSet:
    n_max: int

    def __post_init__(self):
        if self.n_max < 0:
            raise ValueError(f"number of harmonics must be >= 0, got {self.n_max}")

    @property
    def members(self) -> np.ndarray:
        return np.arange(-self.n_max, self.n_max + 1)

    def __len__(self) -> int:
        return 2 * self.n_max + 1


@dataclass(frozen=True)
class SteerableDetector:
    """Learned detector; ``coeffs[i]`` holds ``c_n`` for ``n = i - n_max`` (already normalized)."""

    n_max: int
    r0: float
    kmin: int
    coeffs: np.ndarray
    gamma: float = 0.0
    pad_factor: float = 2.0
    source_shape: tuple = (0, 0)
    normalization: float = 1.0
    backend: str = "exact"
    whitening: str = "analytic"
    inner_products: np.ndarray | None = None  # raw d_n[k], diagnostics only

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.complex128)
        if c.ndim != 2 or c.shape[0] != 2 * self.n_max + 1:
            raise ValueError(f"coefficient array {c.shape} does not match N={self.n_max}")
        if not self.r0 > 0:
            raise ValueError("r0 must be positive")
        if not self.gamma >= 0:
            raise ValueError("gamma must be >= 0")
        if self.whitening not in ("analytic", "reprojected"):
            raise ValueError(f"unknown whitening mode {self.whitening!r}")
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "source_shape", tuple(int(v) for v in self.source_shape))

    @property
    def harmonics(self) -> HarmonicSet:
        return HarmonicSet(self.n_max)

    @property
    def kmax(self) -> int:
        return self.kmin + self.coeffs.shape[1] - 1

    def profile(self, n: int) -> bspline.RadialSplineProfile:
        return bspline.RadialSplineProfile(self.r0, self.kmin, self.coeffs[n + self.n_max])

    def reality_defect(self) -> float:
        """Max of ``|c_{-n} - (-1)^n conj(c_n)|`` relative to ``max |c|``."""
        n = self.harmonics.members
        sign = np.where(n % 2 == 0, 1.0, -1.0)[:, None]
        mirrored = sign * np.conj(self.coeffs[::-1])
        scale = max(np.abs(self.coeffs).max(), 1e-300)
        return float(np.abs(self.coeffs - mirrored).max() / scale)

    @property
    def is_real(self) -> bool:
        return self.reality_defect() <= 1e-9

    @property
    def radial_gamma(self) -> float:
        """Exponent applied at synthesis (``2 * gamma`` unless already folded in)."""
        return 2 * self.gamma if self.whitening == "analytic" else 0.0


def default_r0(shape) -> float:
    """One DFT bin of the unpadded template grid, in radians/pixel."""
    return 2 * np.pi / min(shape)


def knot_range(r0: float) -> tuple[int, int]:
    """Atoms whose knots ``k * r0`` stay within the Nyquist disc."""
    return bspline.KMIN, int(math.floor(np.pi / r0 + 1e-9))


def template_spectrum(template, pad_factor: float = 2.0, workers: int | None = None) -> np.ndarray:
    """DFT of the zero-padded template with its nominal center moved to the origin."""
    padded = np.asarray(grid.zero_pad(template, pad_factor))
    return grid.fft2(grid.to_origin(padded), workers)


class _BinGeometry:
    """Per-bin polar coordinates and spline weights, shared across harmonics.

    On even-sized grids the Nyquist row/column is ambiguous (``-pi`` and ``+pi``
    alias); such bins are represented by every alias with equal shares, which
    keeps the sampled atoms Hermitian.  Points ``0..nbins-1`` are the bins
    themselves, the extra points are the alternative aliases.
    """

    def __init__(self, shape, r0: float, kmin: int, kmax: int):
        h, w = shape
        wy, wx = grid.frequency_axes(shape)
        WX, WY = np.meshgrid(wx, wy)
        WX, WY = WX.ravel(), WY.ravel()
        mult = np.ones(h * w)
        extra_bin, ex_x, ex_y = [], [], []
        rows, cols = np.divmod(np.arange(h * w), w)
        ny_r = (h % 2 == 0) & (rows == h // 2)
        ny_c = (w % 2 == 0) & (cols == w // 2)
        for sel, dx, dy in ((ny_c & ~ny_r, 2 * np.pi, 0.0), (ny_r & ~ny_c, 0.0, 2 * np.pi)):
            b = np.nonzero(sel)[0]
            mult[b] = 0.5
            extra_bin.append(b)
            ex_x.append(WX[b] + dx)
            ex_y.append(WY[b] + dy)
        corner = np.nonzero(ny_r & ny_c)[0]
        if corner.size:
            mult[corner] = 0.25
            for dx, dy in ((2 * np.pi, 0.0), (0.0, 2 * np.pi), (2 * np.pi, 2 * np.pi)):
                extra_bin.append(corner)
                ex_x.append(WX[corner] + dx)
                ex_y.append(WY[corner] + dy)
        self.extra_bin = np.concatenate(extra_bin) if extra_bin else np.zeros(0, np.int64)
        px = np.concatenate([WX] + ex_x)
        py = np.concatenate([WY] + ex_y)
        self.mult = np.concatenate([mult, np.full(self.extra_bin.size, 0.0)])
        if self.extra_bin.size:
            self.mult[h * w:] = mult[self.extra_bin]
        self.shape = tuple(shape)
        self.nbins = h * w
        self.r = np.hypot(px, py)
        self.theta = np.mod(np.arctan2(py, px), 2 * np.pi)
        self.kmin, self.kmax = kmin, kmax
        base, wts = bspline.spline_weights(self.r / r0)
        self.idx = []
        self.w = []
        for o in range(3):
            k = base - o
            ok = (k >= kmin) & (k <= kmax)
            self.idx.append(np.where(ok, k - kmin, 0))
            self.w.append(np.where(ok, wts[o], 0.0))
        self.dc = self.r == 0
        self._spline = None

    def gather(self, bin_values: np.ndarray) -> np.ndarray:
        """Per-bin values expanded to points (aliases repeat their bin)."""
        flat = np.asarray(bin_values).ravel()
        return np.concatenate([flat, flat[self.extra_bin]])

    def scatter(self, point_values: np.ndarray) -> np.ndarray:
        """Share-weighted sum of point values back onto the bins."""
        v = point_values * self.mult
        out = v[:self.nbins].copy()
        if self.extra_bin.size:
            np.add.at(out, self.extra_bin, v[self.nbins:])
        return out.reshape(self.shape)

    def counts(self) -> np.ndarray:
        K = self.kmax - self.kmin + 1
        total = np.zeros(K)
        for idx, w in zip(self.idx, self.w):
            total += np.bincount(idx[w > 0], weights=self.mult[w > 0], minlength=K)
        return total

    def angular(self, n: int, sign: int) -> np.ndarray:
        """``exp(sign * j n theta)`` with the DC bin set to ``[n == 0]``."""
        if n == 0:
            return np.ones(self.r.shape, dtype=np.complex128)
        e = np.exp(sign * 1j * n * self.theta)
        e[self.dc] = 0.0
        return e

    @property
    def spline_matrix(self) -> scipy.sparse.csr_matrix:
        """Sparse ``points x atoms`` matrix of spline weights (three per point)."""
        if self._spline is None:
            P, K = self.r.size, self.kmax - self.kmin + 1
            rows = np.tile(np.arange(P), 3)
            self._spline = scipy.sparse.csr_matrix(
                (np.concatenate(self.w), (rows, np.concatenate(self.idx))), shape=(P, K))
        return self._spline

    def radial_values(self, coeffs: np.ndarray, r0: float) -> np.ndarray:
        return self.spline_matrix @ np.asarray(coeffs, dtype=np.complex128) / r0

    def angular_series(self, ns, sign: int = 1):
        """Yield ``(n, exp(sign j n theta))`` ordered by ``|n|``, by running products.

        Equivalent to :meth:`angular` for each ``n`` but needs a single complex
        exponential for the whole series.
        """
        todo = sorted({int(n) for n in ns}, key=lambda n: (abs(n), n))
        e1 = self.angular(1, sign)
        cur, m = np.ones(self.r.shape, dtype=np.complex128), 0
        for n in todo:
            while m < abs(n):
                cur = cur * e1
                m += 1
            if n == 0:
                yield 0, np.ones(self.r.shape, dtype=np.complex128)
            else:
                yield n, cur if n > 0 else np.conj(cur)


def resolved_kmin(n: int, r0: float, shape, kmin: int, samples: float) -> int:
    """Smallest atom whose central ring carries ``samples`` bins per period of ``e^{j n theta}``.

    Nearer to DC the lattice cannot separate harmonic ``n`` from lower ones
    (its 4-fold symmetry folds ``n = 4m`` onto the isotropic part), so those
    atoms are left out of the fit for that harmonic.
    """
    if n == 0 or samples <= 0:
        return kmin
    step = 2 * np.pi / min(shape)
    # ring radius (k + 3/2) r0 must hold samples * |n| bins around its circumference
    rho = samples * abs(n) / (2 * np.pi) * step
    return max(kmin, int(math.ceil(rho / r0 - 1.5 - 1e-9)))


def _warn_under_resolved(geom: _BinGeometry) -> None:
    counts = geom.counts()
    low = np.nonzero(counts < MIN_ANNULUS_BINS)[0] + geom.kmin
    if low.size:
        warnings.warn(
            f"atoms k={low.tolist()} see fewer than {MIN_ANNULUS_BINS} DFT bins; "
            "increase the pad factor or r0",
            UnderResolvedWarning, stacklevel=3,
        )


def _inner_products(geom: _BinGeometry, spec_flat: np.ndarray, ns, r0: float,
                    weighted: bool) -> np.ndarray:
    K = geom.kmax - geom.kmin + 1
    area = grid.bin_area(geom.shape)
    if weighted:
        scale = area * geom.mult
    else:
        # int g dtheta dr = int g / r dw; the DC cell is treated as an equal-area disc
        scale = np.empty(geom.r.shape)
        nz = ~geom.dc
        scale[nz] = area * geom.mult[nz] / geom.r[nz]
        scale[geom.dc] = 2 * np.pi * math.sqrt(area / np.pi)
    base_vals = geom.gather(spec_flat) * scale
    out = np.zeros((len(ns), K), dtype=np.complex128)
    for i, n in enumerate(ns):
        vals = base_vals * geom.angular(int(n), -1)
        for idx, w in zip(geom.idx, geom.w):
            out[i] += np.bincount(idx, weights=vals.real * w, minlength=K)
            out[i] += 1j * np.bincount(idx, weights=vals.imag * w, minlength=K)
    return out / (2 * np.pi * r0)


def profile_coefficients(spectrum, n: int, r0: float, kmin: int, kmax: int,
                         weighted: bool = True, warn: bool = True) -> np.ndarray:
    """``d_n[k] = (1/2pi) sum_bins T^(w) conj(phi_{n,k}(w)) dw``.

    ``spectrum`` is an unshifted DFT whose spatial origin is the template center.
    With ``weighted=False`` each bin is divided by its radius, which turns the
    2-D sum into the unweighted radial integral used by the ``paper`` backend.
    """
    spec = np.asarray(spectrum)
    geom = _BinGeometry(spec.shape, r0, kmin, kmax)
    if warn:
        _warn_under_resolved(geom)
    return _inner_products(geom, spec.ravel(), [n], r0, weighted)[0]


def _solve_profiles(d: np.ndarray, ns, starts, r0: float, kmin: int, kmax: int,
                    backend: str, taps: int) -> np.ndarray:
    """Coefficients per harmonic; atoms below ``starts[i]`` are held at zero."""
    if backend not in bspline.BACKENDS:
        raise ValueError(f"unknown backend {backend!r}; expected one of {bspline.BACKENDS}")
    c = np.zeros_like(d)
    hinv = bspline.inverse_filter(bspline.autocorr_filter(), taps) if backend == "paper" else None
    grams = {}
    for i, (n, k0) in enumerate(zip(ns, starts)):
        lo = k0 - kmin
        if k0 > kmax:
            continue
        if backend == "exact":
            if k0 not in grams:
                grams[k0] = bspline.radial_gram(r0, k0, kmax)
            c[i, lo:] = bspline.solve_gram(grams[k0], 2 * np.pi * d[i, lo:])
        else:
            c[i, lo:] = bspline.convolve_centered(r0 * d[i, lo:], hinv)
    return c


def spectral_norm2(coeffs: np.ndarray, r0: float, kmin: int, kmax: int) -> float:
    """``sum_n c_n^H G c_n``: squared L2 norm of the spline spectrum (no whitening)."""
    Gd = bspline.radial_gram(r0, kmin, kmax).dense()
    return float(np.real(np.einsum("nk,kl,nl->", np.conj(coeffs), Gd, coeffs)))


def learn_detector(template, n_max: int, r0: float | None = None, pad_factor: float = 2.0,
                   gamma: float = 0.0, backend: str = "exact", reproject_whitening: bool = False,
                   taps: int = bspline.DEFAULT_INVERSE_TAPS, workers: int | None = None,
                   angular_samples: float = ANGULAR_SAMPLES) -> SteerableDetector:
    """Learn the optimal steerable detector for ``template`` with harmonics ``|n| <= n_max``.

    The result is scaled so its (un-whitened) spatial L2 norm is 1.  With
    ``reproject_whitening`` the ``r**(2 gamma)`` factor is folded into the spline
    fit instead of being applied at synthesis.  Harmonic ``n`` only uses atoms
    whose ring carries ``angular_samples`` DFT bins per angular period (see
    :func:`resolved_kmin`); 0 disables the guard.
    """
    t = np.asarray(template, dtype=np.float64)
    if t.ndim != 2 or not np.all(np.isfinite(t)):
        raise ValueError("template must be a finite 2-D array")
    if not np.any(t):
        raise ValueError("template is identically zero")
    hs = HarmonicSet(n_max)
    r0 = default_r0(t.shape) if r0 is None else float(r0)
    if not r0 > 0:
        raise ValueError(f"r0 must be positive, got {r0}")
    if not gamma >= 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    if backend not in bspline.BACKENDS:
        raise ValueError(f"unknown backend {backend!r}; expected one of {bspline.BACKENDS}")
    kmin, kmax = knot_range(r0)

    spec = template_spectrum(t, pad_factor, workers)
    geom = _BinGeometry(spec.shape, r0, kmin, kmax)
    _warn_under_resolved(geom)
    flat = spec.ravel()
    if reproject_whitening and gamma > 0:
        flat = flat * geom.r[:geom.nbins] ** (2 * gamma)
    ns = hs.members
    d = _inner_products(geom, flat, ns, r0, weighted=(backend == "exact"))
    starts = [resolved_kmin(int(n), r0, spec.shape, kmin, angular_samples) for n in ns]
    c = _solve_profiles(d, ns, starts, r0, kmin, kmax, backend, taps)
    # spatial norm^2 = spectral norm^2 / (4 pi^2)
    norm = math.sqrt(spectral_norm2(c, r0, kmin, kmax)) / (2 * np.pi)
    if norm == 0:
        raise ArithmeticError("template has no energy in the chosen harmonics")
    return SteerableDetector(
        n_max=n_max, r0=r0, kmin=kmin, coeffs=c / norm, gamma=float(gamma),
        pad_factor=float(pad_factor), source_shape=t.shape, normalization=1.0 / norm,
        backend=backend, whitening="reprojected" if reproject_whitening and gamma > 0 else "analytic",
        inner_products=d,
    )


def apply_whitening(det: SteerableDetector, gamma: float) -> SteerableDetector:
    """Record the whitening exponent; ``r**(2 gamma)`` is applied at synthesis."""
    if not gamma >= 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    if det.whitening == "reprojected":
        raise ValueError("whitening is folded into this detector's splines; re-learn instead")
    return dataclasses.replace(det, gamma=float(gamma))


def truncate_harmonics(det: SteerableDetector, n_max: int) -> SteerableDetector:
    """Restrict a detector to ``|n| <= n_max`` (coefficients are not renormalized)."""
    if not 0 <= n_max <= det.n_max:
        raise ValueError(f"cannot truncate N={det.n_max} to {n_max}")
    lo = det.n_max - n_max
    d = None if det.inner_products is None else det.inner_products[lo:lo + 2 * n_max + 1]
    return dataclasses.replace(det, n_max=n_max, coeffs=det.coeffs[lo:lo + 2 * n_max + 1],
                               inner_products=d)


def harmonic_spectra(det: SteerableDetector, shape, ns=None):
    """Yield ``(n, F_n)`` with ``F_n = r**(2 gamma) P_n(r) e^{j n theta}`` on the DFT grid.

    Harmonics come out ordered by ``|n|``.
    """
    geom = _BinGeometry(shape, det.r0, det.kmin, det.kmax)
    weight = geom.r ** det.radial_gamma if det.radial_gamma else None  # per point
    for n, ang in geom.angular_series(det.harmonics.members if ns is None else ns, +1):
        radial = geom.radial_values(det.coeffs[n + det.n_max], det.r0)
        if weight is not None:
            radial *= weight
        yield n, geom.scatter(radial * ang)


def synthesize_filter(det: SteerableDetector, shape) -> SpectralGrid:
    """Detector spectrum on an unshifted DFT grid of the given ``(height, width)``."""
    shape = tuple(np.asarray(shape).shape) if not isinstance(shape, tuple) else shape
    total = np.zeros(shape, dtype=np.complex128)
    for _, Fn in harmonic_spectra(det, shape):
        total += Fn
    return SpectralGrid(total)


def filter_kernel(det: SteerableDetector, shape) -> np.ndarray:
    """Spatial filter on a periodic grid, centered at the grid's nominal center."""
    F = np.asarray(synthesize_filter(det, shape))
    return grid.from_origin(grid.real_part(grid.ifft2(F), tol=1e-9))


def approximate_template(det: SteerableDetector, template) -> tuple[RasterGrid, float]:
    """Best amplitude-scaled spatial approximation of ``template`` by the un-whitened detector."""
    t = np.asarray(template, dtype=np.float64)
    if t.shape != det.source_shape:
        raise ValueError(f"template {t.shape} does not match detector source {det.source_shape}")
    plain = dataclasses.replace(det, gamma=0.0) if det.whitening == "analytic" else det
    padded_shape = np.asarray(grid.zero_pad(t, det.pad_factor)).shape
    F = np.asarray(synthesize_filter(plain, padded_shape))
    a = grid.from_origin(grid.real_part(grid.ifft2(F), tol=1e-9))
    Cy, Cx = grid.center_index(padded_shape)
    cy, cx = grid.center_index(t.shape)
    a = a[Cy - cy:Cy - cy + t.shape[0], Cx - cx:Cx - cx + t.shape[1]]
    den = float(np.sum(a * a))
    amp = float(np.sum(a * t)) / den if den > 0 else 0.0
    approx = amp * a
    rmse = float(np.sqrt(np.mean((t - approx) ** 2)))
    return RasterGrid(approx), rmse


@dataclass(frozen=True)
class SnrReport:
    numerator: float
    variance: float
    snr: float


def snr(filter_spectrum, template_spectrum, bg: BackgroundModel | None = None) -> SnrReport:
    """``|<T, f>|^2 / Var(<S, f>)`` with both spectra on the same centered DFT grid."""
    F = np.asarray(filter_spectrum)
    T = np.asarray(template_spectrum)
    if F.shape != T.shape:
        raise ValueError(f"spectra differ in shape: {F.shape} vs {T.shape}")
    bg = bg or BackgroundModel(0.0, 1.0)
    inner = np.sum(T * np.conj(F)) / F.size
    num = float(abs(inner) ** 2)
    var = predict_variance(F, bg)
    return SnrReport(num, var, num / var if var > 0 else 0.0)


# ------------------------------------------------------------- serialization

def _pairs(a: np.ndarray) -> list:
    return [[float(v.real), float(v.imag)] for v in a]


def detector_to_dict(det: SteerableDetector, provenance: dict | None = None) -> dict:
    doc = {
        "version": FORMAT_VERSION,
        "N": det.n_max,
        "r0": det.r0,
        "gamma": det.gamma,
        "pad_factor": det.pad_factor,
        "knot_range": [det.kmin, det.kmax],
        "normalization": det.normalization,
        "backend": det.backend,
        "whitening": det.whitening,
        "source_dims": [det.source_shape[1], det.source_shape[0]],
        "profiles": [],
    }
    for i, n in enumerate(det.harmonics.members):
        entry = {"n": int(n), "coeffs": _pairs(det.coeffs[i])}
        if det.inner_products is not None:
            entry["d"] = _pairs(det.inner_products[i])
        doc["profiles"].append(entry)
    if provenance is not None:
        doc["provenance"] = provenance
    return doc


def detector_from_dict(doc: dict) -> SteerableDetector:
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported detector format version {doc.get('version')!r}")
    try:
        n_max = int(doc["N"])
        kmin, kmax = (int(v) for v in doc["knot_range"])
        profiles = sorted(doc["profiles"], key=lambda p: p["n"])
        if [p["n"] for p in profiles] != list(range(-n_max, n_max + 1)):
            raise ValueError("profiles do not cover -N..N")
        coeffs = np.array([[complex(re, im) for re, im in p["coeffs"]] for p in profiles])
        if coeffs.shape != (2 * n_max + 1, kmax - kmin + 1):
            raise ValueError("coefficient table does not match the knot range")
        d = None
        if all("d" in p for p in profiles):
            d = np.array([[complex(re, im) for re, im in p["d"]] for p in profiles])
        w, h = doc["source_dims"]
        return SteerableDetector(
            n_max=n_max, r0=float(doc["r0"]), kmin=kmin, coeffs=coeffs,
            gamma=float(doc["gamma"]), pad_factor=float(doc["pad_factor"]),
            source_shape=(int(h), int(w)), normalization=float(doc["normalization"]),
            backend=doc.get("backend", "exact"), whitening=doc.get("whitening", "analytic"),
            inner_products=d,
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"corrupt detector document ({exc!r})") from None


def save_detector(det: SteerableDetector, path, provenance: dict | None = None) -> None:
    Path(path).write_text(json.dumps(detector_to_dict(det, provenance)) + "\n")


def load_detector(path) -> SteerableDetector:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not a detector document ({exc})") from None
    return detector_from_dict(doc)


def provenance_block(config: dict) -> dict:
    return {"library": "steerdet", "version": __version__, "config": config}
