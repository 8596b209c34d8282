"""Quadratic B-splines on radial knots ``k * r0``.

Two ways of turning inner products with the atoms into coefficients are
provided:

``exact``
    solve the banded Gram system of the radially weighted inner product
    ``<f, g> = 2*pi * int_0^inf f(r) conj(g(r)) r dr``.  Its entries are
    ``G[k, l] = 2*pi * ((k + l)/2 + 3/2) * h[l - k]`` away from the origin, so the
    matrix is *not* Toeplitz.
``paper``
    the classical 1-D recipe: convolve unweighted inner products with the
    inverse ``h^-1`` of the sampled autocorrelation ``h[k] = <beta, beta(. - k)>``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

KMIN = -2
BACKENDS = ("exact", "paper")
DEFAULT_INVERSE_TAPS = 81

_GL_X, _GL_W = np.polynomial.legendre.leggauss(16)
_GL_X = 0.5 * (_GL_X + 1.0)  # nodes on [0, 1]
_GL_W = 0.5 * _GL_W


class GramError(ValueError):
    """Gram system is not positive definite."""


def beta2(x):
    """Causal quadratic B-spline, supported on ``[0, 3]``."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    m0 = (x >= 0) & (x < 1)
    m1 = (x >= 1) & (x < 2)
    m2 = (x >= 2) & (x < 3)
    out[m0] = 0.5 * x[m0] ** 2
    out[m1] = 0.75 - (x[m1] - 1.5) ** 2
    out[m2] = 0.5 * (3.0 - x[m2]) ** 2
    return out if out.ndim else float(out)


def autocorr_filter() -> np.ndarray:
    """``h[k] = int beta2(t) beta2(t - k) dt`` for ``k = -2..2`` (index ``k + 2``)."""
    h = np.zeros(5)
    for k in range(3):
        # integrand is piecewise polynomial of degree 4 on unit intervals
        for j in range(k, 3):
            t = j + _GL_X
            h[2 + k] += np.sum(_GL_W * beta2(t) * beta2(t - k))
    h[:2] = h[4:2:-1]
    return h


def inverse_filter(h, length: int = DEFAULT_INVERSE_TAPS) -> np.ndarray:
    """Truncated convolution inverse of a symmetric filter ``h`` (odd length, centered).

    The result has ``length`` taps centered on index ``length // 2``.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 1 or h.size % 2 != 1:
        raise ValueError("filter must be 1-D with an odd number of taps")
    if length < 1 or length % 2 != 1:
        raise ValueError("truncation length must be a positive odd integer")
    half = h.size // 2
    n = max(4096, 4 * (length + h.size))
    kernel = np.zeros(n)
    for i, v in enumerate(h):
        kernel[(i - half) % n] = v
    symbol = np.fft.fft(kernel)
    mag = np.abs(symbol)
    if mag.min() <= 1e-8 * mag.max():
        raise ValueError(f"filter symbol nearly vanishes (min |H| = {mag.min():.2e})")
    inv = np.fft.ifft(1.0 / symbol).real
    m = length // 2
    return np.concatenate([inv[-m:], inv[:m + 1]]) if m else inv[:1].copy()


def convolve_centered(seq, taps) -> np.ndarray:
    """``(taps * seq)[k]`` on the index range of ``seq`` (zero outside)."""
    taps = np.asarray(taps)
    full = np.convolve(np.asarray(seq), taps)
    m = taps.size // 2
    return full[m:m + len(seq)]


# ----------------------------------------------------------------- Gram system

@dataclass(frozen=True)
class GramSystem:
    """Symmetric band matrix in LAPACK upper storage, ``band[2 + i - j, j] = G[i, j]``."""

    band: np.ndarray
    kmin: int
    kmax: int
    weighting: str  # "radial" or "unweighted"

    @property
    def size(self) -> int:
        return self.kmax - self.kmin + 1

    def dense(self) -> np.ndarray:
        n = self.size
        G = np.zeros((n, n))
        for off in range(3):
            diag = self.band[2 - off, off:]
            idx = np.arange(n - off)
            G[idx, idx + off] = diag
            G[idx + off, idx] = diag
        return G

    def matvec(self, c) -> np.ndarray:
        return self.dense() @ np.asarray(c)


def _check_range(kmin: int, kmax: int) -> None:
    if kmax < kmin:
        raise ValueError(f"empty knot range [{kmin}, {kmax}]")
    if kmin < KMIN:
        raise ValueError(f"atoms with k < {KMIN} do not meet r >= 0")


def radial_gram(r0: float, kmin: int = KMIN, kmax: int = 64) -> GramSystem:
    """Gram matrix of the atoms ``(1/r0) beta2(r/r0 - k)`` under the radial inner product.

    The entries do not depend on ``r0``; it is accepted so the call mirrors the
    atom definition.
    """
    if not r0 > 0:
        raise ValueError("r0 must be positive")
    _check_range(kmin, kmax)
    n = kmax - kmin + 1
    band = np.zeros((3, n))
    for i in range(n):
        k = kmin + i
        for off in range(3):
            l = k + off
            if l > kmax:
                break
            lo, hi = max(0, l), k + 3
            acc = 0.0
            for j in range(lo, hi):
                u = j + _GL_X
                acc += np.sum(_GL_W * beta2(u - k) * beta2(u - l) * u)
            band[2 - off, i + off] = 2 * np.pi * acc
    return GramSystem(band, kmin, kmax, "radial")


def toeplitz_gram(kmin: int = KMIN, kmax: int = 64) -> GramSystem:
    """Finite section of the unweighted Toeplitz Gram ``h[l - k]``."""
    _check_range(kmin, kmax)
    h = autocorr_filter()
    n = kmax - kmin + 1
    band = np.zeros((3, n))
    for off in range(3):
        band[2 - off, off:] = h[2 + off]
    return GramSystem(band, kmin, kmax, "unweighted")


def solve_gram(G: GramSystem, d) -> np.ndarray:
    """Solve ``G c = d`` for complex ``d`` by banded Cholesky."""
    d = np.asarray(d)
    if d.shape[0] != G.size:
        raise ValueError(f"right-hand side has {d.shape[0]} entries, Gram has {G.size}")
    try:
        chol = scipy.linalg.cholesky_banded(G.band, lower=False)
    except np.linalg.LinAlgError:
        raise GramError(f"Gram matrix over [{G.kmin}, {G.kmax}] is not positive definite") from None
    if np.iscomplexobj(d):
        rhs = np.concatenate([d.real.reshape(G.size, -1), d.imag.reshape(G.size, -1)], axis=1)
        sol = scipy.linalg.cho_solve_banded((chol, False), rhs)
        half = sol.shape[1] // 2
        c = (sol[:, :half] + 1j * sol[:, half:]).reshape(d.shape)
    else:
        c = scipy.linalg.cho_solve_banded((chol, False), d)
    return c


# ------------------------------------------------------------- radial profiles

@dataclass(frozen=True)
class RadialSplineProfile:
    r0: float
    kmin: int
    coeffs: np.ndarray

    def __post_init__(self):
        if not self.r0 > 0:
            raise ValueError("r0 must be positive")
        c = np.asarray(self.coeffs, dtype=np.complex128)
        if c.ndim != 1 or c.size == 0:
            raise ValueError("coefficients must be a non-empty 1-D sequence")
        object.__setattr__(self, "coeffs", c)

    @property
    def kmax(self) -> int:
        return self.kmin + self.coeffs.size - 1


def spline_weights(u: np.ndarray):
    """Atom indices and weights touching each abscissa ``u = r / r0``.

    Returns ``(base, w)`` with ``w[o] = beta2(u - (base - o))`` for ``o = 0, 1, 2``.
    """
    base = np.floor(u).astype(np.int64)
    f = u - base
    w = np.stack([0.5 * f * f, 0.75 - (f - 0.5) ** 2, 0.5 * (1.0 - f) ** 2])
    return base, w


def eval_profile(p: RadialSplineProfile, r):
    """``sum_k c[k] (1/r0) beta2(r/r0 - k)``."""
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0):
        raise ValueError("radial profiles are defined for r >= 0 only")
    base, w = spline_weights(r / p.r0)
    out = np.zeros(r.shape, dtype=np.complex128)
    for o in range(3):
        idx = base - o - p.kmin
        ok = (idx >= 0) & (idx < p.coeffs.size)
        out[ok] += p.coeffs[idx[ok]] * w[o][ok]
    out /= p.r0
    return out if out.ndim else complex(out)


def knot_inner_products(func: Callable, r0: float, kmin: int, kmax: int,
                        weighted: bool = True) -> np.ndarray:
    """Quadrature of ``int func(r) (1/r0) beta2(r/r0 - k) w(r) dr`` on ``r >= 0``.

    ``w(r) = r`` when ``weighted`` else 1.  Gauss-Legendre, 16 nodes per knot interval.
    """
    _check_range(kmin, kmax)
    n = kmax - kmin + 1
    out = np.zeros(n, dtype=np.complex128)
    for j in range(0, kmax + 3):
        u = j + _GL_X
        r = r0 * u
        fv = np.asarray(func(r), dtype=np.complex128) * _GL_W * r0
        if weighted:
            fv = fv * r
        for k in range(max(kmin, j - 2), min(kmax, j) + 1):
            out[k - kmin] += np.sum(fv * beta2(u - k)) / r0
    return out


def project_radial(func: Callable, r0: float, kmin: int = KMIN, kmax: int = 64,
                   backend: str = "exact", taps: int = DEFAULT_INVERSE_TAPS) -> RadialSplineProfile:
    """Spline approximation of a radial function with the chosen backend."""
    if backend == "exact":
        d = knot_inner_products(func, r0, kmin, kmax, weighted=True)
        c = solve_gram(radial_gram(r0, kmin, kmax), 2 * np.pi * d)
    elif backend == "paper":
        e = r0 * knot_inner_products(func, r0, kmin, kmax, weighted=False)
        c = convolve_centered(e, inverse_filter(autocorr_filter(), taps))
    else:
        raise ValueError(f"unknown backend {backend!r}; expected one of {BACKENDS}")
    return RadialSplineProfile(r0, kmin, c)


def knot_edges(r0: float, rmax: float, sub: int = 4) -> np.ndarray:
    """Quadrature breakpoints on ``[0, rmax]`` that include every knot ``k * r0``."""
    n = int(np.ceil(rmax / r0 - 1e-12))
    edges = np.linspace(0.0, n * r0, n * sub + 1)
    return edges[edges <= rmax * (1 + 1e-12)] if n * r0 > rmax else edges


def radial_inner(f: Callable, g: Callable, edges) -> complex:
    """``2*pi * int f(r) conj(g(r)) r dr`` over ``[edges[0], edges[-1]]``.

    Composite Gauss-Legendre; exact for splines when ``edges`` contains the knots.
    """
    edges = np.asarray(edges, dtype=np.float64)
    r = (edges[:-1, None] + np.diff(edges)[:, None] * _GL_X[None, :]).ravel()
    w = (np.diff(edges)[:, None] * _GL_W[None, :]).ravel()
    return complex(2 * np.pi * np.sum(w * np.asarray(f(r)) * np.conj(np.asarray(g(r))) * r))


def weighted_l2_error(func: Callable, p: RadialSplineProfile, rmax: float) -> float:
    """``||func - p||`` under the radial inner product on ``[0, rmax]``."""
    def diff(r):
        return np.asarray(func(r)) - eval_profile(p, r)
    return float(np.sqrt(abs(radial_inner(diff, diff, knot_edges(p.r0, rmax)))))
