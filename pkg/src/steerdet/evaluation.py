"""Pixelwise PR/ROC scoring, angular errors and parameter sweeps."""
from __future__ import annotations

import csv
import itertools
import math
import time
from dataclasses import dataclass, field, asdict
from typing import Iterable, Sequence

import numpy as np

from . import background as bgm
from . import detect as dt
from . import harmonics as hm


@dataclass(frozen=True)
class LabeledScores:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64).ravel()
        l = np.asarray(self.labels, dtype=bool).ravel()
        if s.shape != l.shape:
            raise ValueError("scores and labels differ in length")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", l)

    @property
    def positives(self) -> int:
        return int(self.labels.sum())


@dataclass
class Curves:
    """Threshold sweep over distinct scores, highest first.

    ``pr`` is ``(recall, precision)`` starting at ``(0, 1)``; ``roc`` is
    ``(fpr, tpr)`` from ``(0, 0)`` to ``(1, 1)``.
    """

    thresholds: np.ndarray
    pr: tuple
    roc: tuple
    pr_auc: float
    roc_auc: float


@dataclass
class EvalReport:
    pr_auc: float
    roc_auc: float
    mean_abs_angular_error: float
    curves: Curves | None = None
    config: dict = field(default_factory=dict)


# ------------------------------------------------------------------- labels

def score_labels(amp, truth: Sequence, radius: float = 0.0) -> LabeledScores:
    """Label every pixel of ``amp``.

    With ``radius == 0`` exactly the truth pixels are positive.  With a positive
    radius, each truth marks the single highest-scoring pixel of its disc.
    """
    a = np.asarray(amp, dtype=np.float64)
    h, w = a.shape
    if radius < 0:
        raise ValueError("radius must be >= 0")
    pts = [(int(p.x), int(p.y)) for p in truth]
    for x, y in pts:
        if not (0 <= x < w and 0 <= y < h):
            raise ValueError(f"truth ({x}, {y}) lies outside the {w}x{h} map")
    if len(set(pts)) != len(pts):
        raise ValueError("duplicate truth positions")
    if radius > 0:
        for (x1, y1), (x2, y2) in itertools.combinations(pts, 2):
            if math.hypot(x1 - x2, y1 - y2) <= 2 * radius:
                raise ValueError(f"truth discs around ({x1}, {y1}) and ({x2}, {y2}) overlap")
    labels = np.zeros((h, w), dtype=bool)
    R = int(math.floor(radius))
    for x, y in pts:
        if radius == 0:
            labels[y, x] = True
            continue
        y0, y1 = max(0, y - R), min(h, y + R + 1)
        x0, x1 = max(0, x - R), min(w, x + R + 1)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        inside = np.hypot(xx - x, yy - y) <= radius
        sub = np.where(inside, a[y0:y1, x0:x1], -np.inf)
        k = int(np.argmax(sub))
        labels[y0 + k // (x1 - x0), x0 + k % (x1 - x0)] = True
    return LabeledScores(a.ravel(), labels.ravel())


# ------------------------------------------------------------------ PR / ROC

def pr_roc(data: LabeledScores) -> Curves:
    """Precision-recall and ROC curves with trapezoidal areas; tied scores form one step."""
    s, l = data.scores, data.labels
    P = int(l.sum())
    N = l.size - P
    if P == 0 or N == 0:
        raise ValueError("need at least one positive and one negative label")
    order = np.argsort(-s, kind="stable")
    s, l = s[order], l[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(l)[last].astype(np.float64)
    fp = (last + 1) - tp
    tpr = np.r_[0.0, tp / P]
    fpr = np.r_[0.0, fp / N]
    recall = tpr
    precision = np.r_[1.0, tp / (tp + fp)]
    roc_auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1])) / 2)
    pr_auc = float(np.sum(np.diff(recall) * (precision[1:] + precision[:-1])) / 2)
    return Curves(s[last], (recall, precision), (fpr, tpr), pr_auc, roc_auc)


# --------------------------------------------------------------- angles

def circular_error(estimate, truth, symmetry: int = 1):
    """Smallest absolute difference between angles modulo ``2 pi / symmetry`` (radians)."""
    period = 2 * np.pi / symmetry
    d = np.mod(np.asarray(estimate) - np.asarray(truth), period)
    return np.minimum(d, period - d)


def angular_error(estimates, truth: Sequence, symmetry: int = 1) -> float:
    """Mean circular error in degrees.

    ``estimates`` is either one angle per truth or an orientation map sampled at
    the truth pixels.
    """
    if len(truth) == 0:
        raise ValueError("no truths to compare against")
    if symmetry < 1:
        raise ValueError("symmetry order must be >= 1")
    est = np.asarray(estimates, dtype=np.float64)
    if est.ndim == 2:
        est = np.array([est[p.y, p.x] for p in truth])
    if est.shape != (len(truth),):
        raise ValueError(f"{est.size} estimates for {len(truth)} truths")
    err = circular_error(est, [p.theta for p in truth], symmetry)
    return float(np.degrees(err).mean())


def match_detections(detections: Sequence, truth: Sequence, tolerance: float = 1.0):
    """Greedy one-to-one matching in descending score; returns ``(detection, truth)`` pairs."""
    free = list(truth)
    pairs = []
    for d in sorted(detections, key=lambda d: -d.score):
        best, bd = None, math.inf
        for p in free:
            dist = math.hypot(d.x - p.x, d.y - p.y)
            if dist <= tolerance and dist < bd:
                best, bd = p, dist
        if best is not None:
            free.remove(best)
            pairs.append((d, best))
    return pairs


def evaluate(maps: dt.ResponseMaps, truth: Sequence, radius: float = 0.0,
             config: dict | None = None, keep_curves: bool = False) -> EvalReport:
    curves = pr_roc(score_labels(maps.amp, truth, radius))
    ang = angular_error(maps.ang, truth, maps.symmetry)
    return EvalReport(curves.pr_auc, curves.roc_auc, ang,
                      curves if keep_curves else None, dict(config or {}))


# ------------------------------------------------------------------ sweeps

SWEEP_COLUMNS = ["sigma", "N", "M", "gamma", "whitening", "seed",
                 "pr_auc", "roc_auc", "ang_err_deg", "runtime_ms"]


@dataclass(frozen=True)
class SweepSetup:
    """Everything a sweep holds fixed."""

    template: np.ndarray = field(compare=False, repr=False)
    width: int = 1200
    height: int = 1200
    count: int = 10
    background_gamma: float = 1.2
    amplitude: float = 1.0
    min_spacing: float | None = None
    symmetry: int = 1
    radius: float = 0.0
    r0: float | None = None
    pad_factor: float = 2.0
    backend: str = "exact"

    def echo(self) -> dict:
        d = asdict(self)
        d.pop("template")
        d["template_dims"] = list(np.asarray(self.template).shape[::-1])
        return d


def config_grid(sigma=(1.0,), N=(8,), M=(30,), gamma=(1.2,), whitening=(True,)) -> list[dict]:
    return [dict(sigma=float(s), N=int(n), M=int(m), gamma=float(g), whitening=bool(wh))
            for s, n, m, g, wh in itertools.product(sigma, N, M, gamma, whitening)]


class _Fixture:
    """Per-seed unit background and template layer, shared across configs."""

    def __init__(self, setup: SweepSetup):
        self.setup = setup
        self.extent = bgm.template_extent(setup.template)
        self._seed: dict = {}
        self._det: dict = {}

    def scene(self, seed: int):
        if seed not in self._seed:
            s = self.setup
            unit = np.asarray(bgm.synthesize_iss(s.width, s.height,
                                                 bgm.BackgroundModel(s.background_gamma, 1.0), seed))
            spacing = s.min_spacing if s.min_spacing is not None else 2 * self.extent
            truth = bgm.random_placements(s.count, s.width, s.height, self.extent, spacing,
                                          seed=np.random.SeedSequence(seed).spawn(1)[0])
            layer = np.asarray(bgm.blend_templates(np.zeros((s.height, s.width)), s.template,
                                                   truth, s.amplitude))
            self._seed = {seed: (unit, layer, truth)}  # one seed at a time bounds memory
        return self._seed[seed]

    def detector(self, N: int) -> hm.SteerableDetector:
        if N not in self._det:
            s = self.setup
            self._det[N] = hm.learn_detector(s.template, N, r0=s.r0, pad_factor=s.pad_factor,
                                             backend=s.backend)
        return self._det[N]


def synthetic_scene(setup: SweepSetup, seed: int, sigma: float = 1.0):
    """The image and placements a sweep uses for ``seed`` at noise level ``sigma``."""
    unit, layer, truth = _Fixture(setup).scene(seed)
    return sigma * unit + layer, truth


def run_cell(fx: _Fixture, cfg: dict, seed: int, workers: int | None = None) -> dict:
    s = fx.setup
    unit, layer, truth = fx.scene(seed)
    image = cfg["sigma"] * unit + layer
    det = fx.detector(cfg["N"])
    det = hm.apply_whitening(det, cfg["gamma"] if cfg["whitening"] else 0.0)
    t0 = time.perf_counter()
    basis = dt.basis_responses(image, det, workers=workers)
    maps = dt.steer(basis, cfg["M"], s.symmetry)
    runtime = (time.perf_counter() - t0) * 1e3
    rep = evaluate(maps, truth, s.radius)
    return dict(cfg, seed=seed, pr_auc=rep.pr_auc, roc_auc=rep.roc_auc,
                ang_err_deg=rep.mean_abs_angular_error, runtime_ms=runtime)


def sweep(configs: Iterable[dict], seeds: Sequence[int], setup: SweepSetup,
          workers: int | None = None, timing: bool = True, progress=None) -> list[dict]:
    """Evaluate every (config, seed) pair, then append one seed-averaged row per config.

    Averaged rows carry ``seed == "mean"``.  With ``timing=False`` the runtime
    column is 0 so that tables are reproducible byte for byte.
    """
    configs = list(configs)
    seeds = list(seeds)
    if not configs or not seeds:
        raise ValueError("sweep needs at least one configuration and one seed")
    fx = _Fixture(setup)
    per_cfg: dict = {i: [] for i in range(len(configs))}
    rows = []
    # seed-major order reuses each synthesized scene across all configs
    for seed in seeds:
        for i, cfg in enumerate(configs):
            try:
                row = run_cell(fx, cfg, int(seed), workers)
            except Exception as exc:
                raise type(exc)(f"config {cfg} seed {seed}: {exc}") from exc
            if not timing:
                row["runtime_ms"] = 0.0
            per_cfg[i].append(row)
            if progress:
                progress(row)
    for i, cfg in enumerate(configs):
        rows.extend(per_cfg[i])
    for i, cfg in enumerate(configs):
        cell = per_cfg[i]
        mean = dict(cfg, seed="mean")
        for key in ("pr_auc", "roc_auc", "ang_err_deg", "runtime_ms"):
            mean[key] = float(np.mean([r[key] for r in cell]))
        rows.append(mean)
    return rows


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_sweep(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in SWEEP_COLUMNS])


def read_sweep(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
