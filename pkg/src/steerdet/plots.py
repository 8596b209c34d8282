"""Figures written next to CLI outputs (Agg backend, PNG files)."""
from __future__ import annotations

import math
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)


def plot_approx(rows, path, title: str = "") -> None:
    """RMSE against the number of harmonics."""
    N = [int(r["N"]) for r in rows]
    rmse = [float(r["rmse"]) for r in rows]
    fig, ax = plt.subplots(figsize=(4.5, 3.4))
    ax.plot(N, rmse, "o-", color="k")
    ax.set_xlabel("N (harmonics |n| <= N)")
    ax.set_ylabel("RMSE")
    ax.set_xticks(N)
    ax.grid(alpha=0.3)
    if title:
        ax.set_title(title)
    _save(fig, path)


def _varying(rows, keys):
    return [k for k in keys if len({str(r[k]) for r in rows}) > 1]


def plot_sweep(rows, path) -> None:
    """Seed-averaged PR and ROC AUC against the first swept numeric parameter.

    Remaining swept parameters (whitening included) become separate lines; a
    sweep over whitening alone is drawn as bars.
    """
    mean = [r for r in rows if str(r["seed"]) == "mean"]
    vary = _varying(mean, ["sigma", "N", "M", "gamma", "whitening"])
    numeric = [k for k in vary if k != "whitening"]
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.4))
    metrics = (("pr_auc", "PR AUC"), ("roc_auc", "ROC AUC"))
    if not numeric:
        grp = sorted(mean, key=lambda r: str(r["whitening"]))
        names = ["whitened" if _flag(r["whitening"]) else "plain" for r in grp]
        for ax, (key, what) in zip(axes, metrics):
            ax.bar(names, [float(r[key]) for r in grp], color="0.4")
            ax.set_ylabel(what)
            ax.grid(alpha=0.3, axis="y")
        _save(fig, path)
        return
    xkey, rest = numeric[0], [k for k in vary if k != numeric[0]]
    groups = defaultdict(list)
    for r in mean:
        groups[tuple((k, r[k]) for k in rest)].append(r)
    for label, grp in sorted(groups.items(), key=lambda kv: str(kv[0])):
        grp = sorted(grp, key=lambda r: float(r[xkey]))
        xs = [float(r[xkey]) for r in grp]
        name = ", ".join(f"{k}={v}" for k, v in label) or None
        for ax, (key, _) in zip(axes, metrics):
            ax.plot(xs, [float(r[key]) for r in grp], "o-", label=name)
    for ax, (_, what) in zip(axes, metrics):
        ax.set_xlabel(xkey)
        ax.set_ylabel(what)
        ax.grid(alpha=0.3)
    if len(groups) > 1:
        axes[0].legend(fontsize=7)
    _save(fig, path)


def _flag(v) -> bool:
    return str(v).lower() in ("1", "true", "on")


def _reduce(a: np.ndarray, f: int, how) -> np.ndarray:
    """Block-reduce by ``f`` in both directions (edges padded with the border value)."""
    if f <= 1:
        return a
    h, w = a.shape
    H, W = -(-h // f) * f, -(-w // f) * f
    a = np.pad(a, ((0, H - h), (0, W - w)), mode="edge")
    return how(a.reshape(H // f, f, W // f, f), axis=(1, 3))


def plot_detections(image, amp, detections, path, truth=(), arrow: float = 12.0,
                    max_pixels: int = 600) -> None:
    """Image with detections (red, orientation ticks) and truth (cyan rings), beside the amplitude map.

    Rasters larger than ``max_pixels`` are block-reduced for display: the image
    by its mean, the amplitude map by its maximum so peaks stay visible.
    """
    img, amp = np.asarray(image), np.asarray(amp)
    h, w = img.shape
    f = max(1, math.ceil(max(h, w) / max_pixels))
    extent = (-0.5, w - 0.5, h - 0.5, -0.5)
    fig, axes = plt.subplots(1, 2, figsize=(9, 4.4))
    axes[0].imshow(_reduce(img, f, np.mean), cmap="gray", extent=extent)
    for d in detections:
        dx, dy = arrow * math.cos(d.angle), arrow * math.sin(d.angle)
        axes[0].plot([d.x - dx, d.x + dx], [d.y - dy, d.y + dy], "r-", lw=1)
        axes[0].plot(d.x, d.y, "r+", ms=5)
    for p in truth:
        axes[0].plot(p.x, p.y, "o", mfc="none", mec="c", ms=9)
    axes[0].set_title(f"{len(detections)} detections")
    im = axes[1].imshow(_reduce(amp, f, np.max), cmap="magma", extent=extent)
    fig.colorbar(im, ax=axes[1], fraction=0.046)
    axes[1].set_title("amplitude" if f == 1 else f"amplitude ({f}x{f} block max)")
    for ax in axes:
        ax.set_axis_off()
    _save(fig, path)


def plot_curves(curves, path) -> None:
    """PR and ROC curves of a single evaluation."""
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.4))
    rec, prec = curves.pr
    fpr, tpr = curves.roc
    axes[0].plot(rec, prec, "k-")
    axes[0].set_xlabel("recall")
    axes[0].set_ylabel("precision")
    axes[0].set_title(f"PR AUC {curves.pr_auc:.3f}")
    axes[1].plot(fpr, tpr, "k-")
    axes[1].set_xscale("symlog", linthresh=1e-5)
    axes[1].set_xlabel("false positive rate")
    axes[1].set_ylabel("true positive rate")
    axes[1].set_title(f"ROC AUC {curves.roc_auc:.4f}")
    for ax in axes:
        ax.grid(alpha=0.3)
    _save(fig, path)
