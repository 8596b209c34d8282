"""Raster/spectral grid containers, DFT conventions and grid file I/O.

Conventions used throughout the package:

* arrays are indexed ``[row, col]`` = ``[y, x]``; ``x`` grows with the column
  index and ``y`` with the row index;
* the forward DFT is unnormalized and the inverse carries ``1/(width*height)``;
* frequencies are in radians/pixel on ``[-pi, pi)``, unshifted (bin 0 is DC),
  so the Nyquist row/column of an even-sized grid sits at ``-pi``;
* a template's nominal center is the pixel ``((width-1)//2, (height-1)//2)``.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft

logger = logging.getLogger(__name__)

THREADS_ENV = "STEERDET_THREADS"
CONVENTION = "unnormalized-forward"


class GridFormatError(ValueError):
    """Malformed or inconsistent grid file."""


class SymmetryError(ArithmeticError):
    """An inverse transform left a non-negligible imaginary part."""


def available_cpus() -> int:
    try:
        return len(os.sched_getaffinity(0)) or 1
    except AttributeError:
        return os.cpu_count() or 1


def default_workers() -> int:
    """Thread count from ``$STEERDET_THREADS``, capped at the CPUs this process may use."""
    cpus = available_cpus()
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, min(int(env), cpus))
        except ValueError:
            pass
    return cpus


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class RasterGrid:
    """Real 2-D samples, stored as a read-only ``(height, width)`` array."""

    data: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise ValueError(f"raster must be a non-empty 2-D array, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("raster contains non-finite samples")
        object.__setattr__(self, "data", _freeze(a))

    @classmethod
    def from_samples(cls, width: int, height: int, samples) -> "RasterGrid":
        s = np.asarray(samples, dtype=np.float64)
        if s.size != width * height:
            raise ValueError(f"expected {width * height} samples, got {s.size}")
        return cls(s.reshape(height, width))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def samples(self) -> np.ndarray:
        """Row-major flat view."""
        return self.data.ravel()

    def __array__(self, dtype=None, copy=None):
        a = self.data if dtype is None else self.data.astype(dtype)
        return a.copy() if copy and a is self.data else a


@dataclass(frozen=True)
class SpectralGrid:
    """Complex DFT samples in unshifted order."""

    data: np.ndarray
    convention: str = CONVENTION

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.complex128)
        if a.ndim != 2:
            raise ValueError(f"spectrum must be 2-D, got shape {a.shape}")
        object.__setattr__(self, "data", _freeze(a))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __array__(self, dtype=None, copy=None):
        a = self.data if dtype is None else self.data.astype(dtype)
        return a.copy() if copy and a is self.data else a


@dataclass(frozen=True)
class FreqPoint:
    wx: float
    wy: float
    r: float
    theta: float


# ---------------------------------------------------------------- transforms

def fft2(a, workers: int | None = None) -> np.ndarray:
    return scipy.fft.fft2(np.asarray(a), workers=workers or default_workers())


def ifft2(a, workers: int | None = None) -> np.ndarray:
    return scipy.fft.ifft2(np.asarray(a), workers=workers or default_workers())


def real_part(x: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Drop the imaginary part of an inverse transform, checking it is negligible."""
    num = float(np.linalg.norm(x.imag))
    den = float(np.linalg.norm(x))
    residue = num / den if den > 0 else 0.0
    logger.debug("discarded imaginary residue %.3e (relative)", residue)
    if residue > tol:
        raise SymmetryError(
            f"imaginary residue {residue:.3e} exceeds {tol:.1e}; spectrum is not Hermitian"
        )
    return np.ascontiguousarray(x.real)


def forward_spectrum(g, workers: int | None = None) -> SpectralGrid:
    return SpectralGrid(fft2(np.asarray(g, dtype=np.float64), workers))


def inverse_spectrum(s, tol: float = 1e-10, workers: int | None = None) -> RasterGrid:
    """Inverse DFT of a Hermitian spectrum; raises :class:`SymmetryError` otherwise."""
    spec = np.asarray(s, dtype=np.complex128)
    if not np.all(np.isfinite(spec)):
        raise ValueError("spectrum contains non-finite values")
    return RasterGrid(real_part(ifft2(spec, workers), tol))


# --------------------------------------------------------------- geometry

def center_index(shape: tuple[int, int]) -> tuple[int, int]:
    """Nominal center ``(row, col)`` of a grid."""
    h, w = shape
    return (h - 1) // 2, (w - 1) // 2


def zero_pad(g, factor: float) -> RasterGrid:
    """Embed ``g`` in a zero grid ``ceil(factor * dims)`` large, centers aligned."""
    if not factor >= 1:
        raise ValueError(f"pad factor must be >= 1, got {factor}")
    a = np.asarray(g, dtype=np.float64)
    h, w = a.shape
    H, W = math.ceil(factor * h - 1e-9), math.ceil(factor * w - 1e-9)
    cy, cx = center_index((h, w))
    Cy, Cx = center_index((H, W))
    out = np.zeros((H, W))
    out[Cy - cy:Cy - cy + h, Cx - cx:Cx - cx + w] = a
    return RasterGrid(out)


def to_origin(a: np.ndarray) -> np.ndarray:
    """Circularly shift the nominal center to index ``(0, 0)``."""
    cy, cx = center_index(a.shape)
    return np.roll(a, (-cy, -cx), axis=(0, 1))


def from_origin(a: np.ndarray) -> np.ndarray:
    cy, cx = center_index(a.shape)
    return np.roll(a, (cy, cx), axis=(0, 1))


def frequency_axes(shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """1-D ``(wy, wx)`` axes in radians/pixel, unshifted order."""
    h, w = shape
    return 2 * np.pi * np.fft.fftfreq(h), 2 * np.pi * np.fft.fftfreq(w)


def polar_grid(shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Radius and angle in ``[0, 2pi)`` of every DFT bin (DC has angle 0)."""
    wy, wx = frequency_axes(shape)
    WX, WY = np.meshgrid(wx, wy)
    r = np.hypot(WX, WY)
    theta = np.mod(np.arctan2(WY, WX), 2 * np.pi)
    return r, theta


def bin_area(shape: tuple[int, int]) -> float:
    h, w = shape
    return (2 * np.pi / h) * (2 * np.pi / w)


def freq_point(s, i: int, j: int) -> FreqPoint:
    """Frequency of DFT bin with column index ``i`` and row index ``j``."""
    h, w = np.asarray(s).shape
    if not (0 <= i < w and 0 <= j < h):
        raise IndexError(f"bin ({i}, {j}) outside {w}x{h} grid")
    wy, wx = frequency_axes((h, w))
    x, y = float(wx[i]), float(wy[j])
    r = math.hypot(x, y)
    theta = math.atan2(y, x) % (2 * math.pi) if r > 0 else 0.0
    return FreqPoint(x, y, r, theta)


# --------------------------------------------------------------------- I/O

_DTYPES = {"f32": "<f4", "f64": "<f8"}


def _header_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def write_grid(g, path, dtype: str = "f64", provenance: dict | None = None) -> None:
    """Write a raw little-endian payload at ``path`` plus a ``path.json`` header."""
    if dtype not in _DTYPES:
        raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
    a = np.asarray(g, dtype=np.float64)
    path = Path(path)
    header = {"width": a.shape[1], "height": a.shape[0], "dtype": dtype, "order": "row-major"}
    if provenance is not None:
        header["provenance"] = provenance
    path.write_bytes(np.ascontiguousarray(a, dtype=_DTYPES[dtype]).tobytes())
    _header_path(path).write_text(json.dumps(header, indent=1, sort_keys=True) + "\n")


def _read_raw(path: Path) -> RasterGrid:
    hp = _header_path(path)
    try:
        header = json.loads(hp.read_text())
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise GridFormatError(f"{hp}: malformed header ({exc})") from None
    try:
        w, h = int(header["width"]), int(header["height"])
        dt = _DTYPES[header["dtype"]]
        order = header.get("order", "row-major")
    except (KeyError, TypeError, ValueError) as exc:
        raise GridFormatError(f"{hp}: malformed header ({exc!r})") from None
    if order != "row-major" or w < 1 or h < 1:
        raise GridFormatError(f"{hp}: unsupported layout {order!r} {w}x{h}")
    payload = path.read_bytes()
    itemsize = np.dtype(dt).itemsize
    if len(payload) != w * h * itemsize:
        raise GridFormatError(
            f"{path}: size mismatch, expected {w * h * itemsize} bytes, found {len(payload)}"
        )
    a = np.frombuffer(payload, dtype=dt).astype(np.float64).reshape(h, w)
    if not np.all(np.isfinite(a)):
        raise GridFormatError(f"{path}: non-finite payload")
    return RasterGrid(a, meta={k: v for k, v in header.items() if k == "provenance"})


def _read_pgm(path: Path) -> RasterGrid:
    raw = path.read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise GridFormatError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace before the raster
    if tokens[0] != b"P5":
        raise GridFormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise GridFormatError(f"{path}: malformed PGM header") from None
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise GridFormatError(f"{path}: invalid PGM dimensions or maxval")
    dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * dt.itemsize
    body = raw[pos:pos + need]
    if len(body) != need:
        raise GridFormatError(f"{path}: truncated PGM raster ({len(body)} of {need} bytes)")
    a = np.frombuffer(body, dtype=dt).astype(np.float64).reshape(h, w)
    return RasterGrid(a / maxval)


def read_grid(path) -> RasterGrid:
    """Read a raw grid (payload + ``.json`` sidecar) or a binary PGM."""
    path = Path(path)
    if path.suffix == ".json" and path.with_suffix("").exists():
        path = path.with_suffix("")
    if not path.exists():
        raise FileNotFoundError(f"no such grid file: {path}")
    if path.suffix.lower() == ".pgm":
        return _read_pgm(path)
    return _read_raw(path)
