"""``steerdet`` command-line interface.

Exit codes: 0 success, 1 computational failure, 2 usage or I/O error.  Errors
are reported on a single stderr line ``steerdet: error: <kind>: <message>``.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import resource
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import background as bgm
from . import bspline, grid, templates
from . import detect as dt
from . import evaluation as ev
from . import harmonics as hm

EXIT_OK, EXIT_COMPUTE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Invalid parameters or incompatible inputs."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ------------------------------------------------------------------ parsing

def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return v


def _nonneg_int(s):
    v = int(s)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {s}")
    return v


def _float_list(s):
    try:
        return [float(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from None


def _int_list(s):
    try:
        return [int(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def _bool_list(s):
    table = {"on": True, "off": False, "1": True, "0": False, "true": True, "false": False}
    try:
        return [table[v.strip().lower()] for v in s.split(",") if v.strip()]
    except KeyError:
        raise argparse.ArgumentTypeError(f"expected on/off values, got {s!r}") from None


def _r0(s):
    if s == "auto":
        return s
    v = float(s)
    if not v > 0:
        raise argparse.ArgumentTypeError("r0 must be positive or 'auto'")
    return v


def _gamma(s):
    if s == "estimate":
        return s
    v = float(s)
    if not v >= 0:
        raise argparse.ArgumentTypeError("gamma must be >= 0 or 'estimate'")
    return v


def _threshold(s):
    return float(s)  # accepts inf / -inf


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="steerdet", description="Steerable template detection.")
    p.add_argument("--version", action="version", version=f"steerdet {__version__}")
    p.add_argument("--threads", type=_positive_int, default=None,
                   help=f"cap on worker threads (default: ${grid.THREADS_ENV} or all cores; "
                        "never more than the CPUs available)")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("learn", help="learn a steerable detector from a template")
    s.add_argument("template", help="raw grid, PGM, or builtin:NAME")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--n", type=_nonneg_int, default=8, help="harmonics |n| <= N")
    s.add_argument("--r0", type=_r0, default="auto")
    s.add_argument("--pad", type=float, default=2.0)
    s.add_argument("--gamma", type=_gamma, default=0.0)
    s.add_argument("--background", nargs="+", help="field(s) for --gamma estimate")
    s.add_argument("--backend", choices=bspline.BACKENDS, default="exact")
    s.add_argument("--reproject", action="store_true", help="fold whitening into the spline fit")

    s = sub.add_parser("detect", help="detect and orient template occurrences")
    s.add_argument("image")
    s.add_argument("detector")
    s.add_argument("-o", "--output", required=True, help="prefix for .amp/.ang/.csv/.png")
    s.add_argument("--m", type=_positive_int, default=30, help="tested angles")
    s.add_argument("--threshold", type=_threshold, default=-math.inf)
    s.add_argument("--min-distance", type=float, default=None)
    s.add_argument("--max-detections", type=_nonneg_int, default=100)
    s.add_argument("--symmetry", type=_positive_int, default=1)
    s.add_argument("--gamma", type=_gamma, default=None, help="override whitening exponent")
    s.add_argument("--refine", action="store_true", help="Newton refinement of angles")
    s.add_argument("--boundary", choices=("periodic", "zero"), default="periodic")
    s.add_argument("--truth", help="placement CSV drawn on the figure")
    s.add_argument("--no-plot", action="store_true")

    s = sub.add_parser("synth", help="synthesize an ISS background")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--width", type=_positive_int, default=1200)
    s.add_argument("--height", type=_positive_int, default=1200)
    s.add_argument("--gamma", type=float, default=1.2)
    s.add_argument("--sigma", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dtype", choices=("f32", "f64"), default="f64")

    s = sub.add_parser("blend", help="blend rotated template copies into a background")
    s.add_argument("background")
    s.add_argument("template", help="raw grid, PGM, or builtin:NAME")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--placements", help="read placements from this CSV")
    s.add_argument("--placements-out", help="write generated placements here")
    s.add_argument("--count", type=_nonneg_int, default=10)
    s.add_argument("--min-spacing", type=float, default=None)
    s.add_argument("--amplitude", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("estimate-gamma", help="estimate the self-similarity exponent")
    s.add_argument("fields", nargs="+")
    s.add_argument("--scales", type=_float_list, default=list(bgm.DEFAULT_SCALES))
    s.add_argument("-o", "--output", help="write the estimate as JSON")

    s = sub.add_parser("eval", help="PR/ROC and angular error of response maps")
    s.add_argument("maps", help="prefix written by detect (reads PREFIX.amp and PREFIX.ang)")
    s.add_argument("truth", help="placement CSV")
    s.add_argument("--radius", type=float, default=0.0)
    s.add_argument("--symmetry", type=_positive_int, default=1)
    s.add_argument("-o", "--output", help="write the report as JSON")
    s.add_argument("--curves", help="write PR/ROC curve samples as CSV")
    s.add_argument("--no-plot", action="store_true")

    s = sub.add_parser("sweep", help="parameter sweep on synthetic scenes")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--template", default="builtin:two-blob")
    s.add_argument("--sigma", type=_float_list, default=[1.0])
    s.add_argument("--n", type=_int_list, default=[8])
    s.add_argument("--m", type=_int_list, default=[30])
    s.add_argument("--gamma", type=_float_list, default=[1.2], help="whitening exponents")
    s.add_argument("--whitening", type=_bool_list, default=[True])
    s.add_argument("--seeds", type=_positive_int, default=5, help="seeds 0..k-1")
    s.add_argument("--seed", type=int, default=0, help="first seed")
    s.add_argument("--bg-gamma", type=float, default=1.2)
    s.add_argument("--width", type=_positive_int, default=1200)
    s.add_argument("--height", type=_positive_int, default=1200)
    s.add_argument("--count", type=_nonneg_int, default=10)
    s.add_argument("--amplitude", type=float, default=1.0)
    s.add_argument("--symmetry", type=_positive_int, default=1)
    s.add_argument("--radius", type=float, default=0.0)
    s.add_argument("--r0", type=_r0, default="auto")
    s.add_argument("--pad", type=float, default=2.0)
    s.add_argument("--backend", choices=bspline.BACKENDS, default="exact")
    s.add_argument("--no-timing", action="store_true", help="write runtime_ms as 0")
    s.add_argument("--no-plot", action="store_true")

    s = sub.add_parser("approx", help="template approximation error against N")
    s.add_argument("template", help="raw grid, PGM, or builtin:NAME")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--n-max", type=_nonneg_int, default=9)
    s.add_argument("--r0", type=_r0, default="auto")
    s.add_argument("--pad", type=float, default=2.0)
    s.add_argument("--backend", choices=bspline.BACKENDS, default="exact")
    s.add_argument("--no-plot", action="store_true")
    return p


# ------------------------------------------------------------------ helpers

def _load_raster(spec: str) -> np.ndarray:
    if spec.startswith("builtin:"):
        name = spec.split(":", 1)[1]
        if name not in templates.BUILTIN:
            raise UsageError(f"unknown builtin template {name!r}; choose from {sorted(templates.BUILTIN)}")
        return np.asarray(templates.BUILTIN[name](), dtype=np.float64)
    try:
        return np.asarray(grid.read_grid(spec))
    except FileNotFoundError:
        raise FileNotFoundError(f"cannot read {spec}: no such file") from None


def _read_truth(path: str):
    try:
        return bgm.read_placements(path)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _load_detector(path: str) -> hm.SteerableDetector:
    if not Path(path).exists():
        raise FileNotFoundError(f"cannot read {path}: no such file")
    try:
        return hm.load_detector(path)
    except (ValueError, UnicodeDecodeError) as exc:
        raise UsageError(f"corrupt detector {path}: {exc}") from None


def _config(args, **resolved) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k not in ("no_plot",)}
    cfg.update(resolved)
    for k, v in cfg.items():
        if isinstance(v, float) and not math.isfinite(v):
            cfg[k] = repr(v)
    return cfg


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _sidecar(path, provenance) -> None:
    _write_json(str(path) + ".provenance.json", provenance)


def _say(msg: str) -> None:
    print(msg, flush=True)


def _estimate(fields) -> float:
    est = bgm.estimate_gamma([_load_raster(f) for f in fields])
    return est.gamma


# ---------------------------------------------------------------- commands

def cmd_learn(args) -> int:
    t = _load_raster(args.template)
    if args.pad < 1:
        raise UsageError("--pad must be >= 1")
    gamma = args.gamma
    if gamma == "estimate":
        if not args.background:
            raise UsageError("--gamma estimate needs --background FIELD")
        gamma = max(0.0, _estimate(args.background))
    r0 = hm.default_r0(t.shape) if args.r0 == "auto" else args.r0
    det = hm.learn_detector(t, args.n, r0=r0, pad_factor=args.pad, gamma=gamma,
                            backend=args.backend, reproject_whitening=args.reproject)
    prov = hm.provenance_block(_config(args, gamma=gamma, r0=r0))
    hm.save_detector(det, args.output, prov)
    spec = hm.template_spectrum(t, args.pad)
    F = np.asarray(hm.synthesize_filter(hm.apply_whitening(det, 0.0)
                                        if det.whitening == "analytic" else det, spec.shape))
    rep = hm.snr(F, spec)
    _say(f"knots {det.kmax - det.kmin + 1} [{det.kmin}, {det.kmax}]  harmonics {len(det.harmonics)}"
         f"  r0 {r0:.6g}  gamma {gamma:.4g}")
    _say(f"SNR vs white background (sigma=1, unwhitened) {rep.snr:.6g}")
    return EXIT_OK


def cmd_detect(args) -> int:
    img = _load_raster(args.image)
    det = _load_detector(args.detector)
    th, tw = det.source_shape
    if img.shape[0] < th or img.shape[1] < tw:
        raise UsageError(f"image {img.shape[1]}x{img.shape[0]} is smaller than the "
                         f"{tw}x{th} template the detector was learned from")
    gamma = args.gamma
    if gamma == "estimate":
        gamma = max(0.0, bgm.estimate_gamma(img).gamma)
    if gamma is not None:
        if det.whitening == "reprojected":
            raise UsageError("this detector has whitening folded in; --gamma cannot override it")
        det = hm.apply_whitening(det, gamma)
    md = dt.default_min_distance(det) if args.min_distance is None else args.min_distance
    t0 = time.perf_counter()
    maps, dets = dt.detect(img, det, M=args.m, threshold=args.threshold, min_distance=md,
                           max_detections=args.max_detections or None, symmetry=args.symmetry,
                           refine=args.refine, boundary=args.boundary)
    wall = time.perf_counter() - t0
    prov = hm.provenance_block(_config(args, gamma=det.gamma, min_distance=md))
    out = args.output
    grid.write_grid(maps.amp, out + ".amp", provenance=prov)
    grid.write_grid(maps.ang, out + ".ang", provenance=prov)
    dt.write_detections(dets, out + ".csv")
    _sidecar(out + ".csv", prov)
    if not args.no_plot:
        from . import plots
        truth = _read_truth(args.truth) if args.truth else ()
        plots.plot_detections(img, maps.amp, dets, out + ".png", truth)
    peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0
    _say(f"{len(dets)} detections  wall {wall:.3f} s  peak memory {peak:.1f} MiB")
    return EXIT_OK


def cmd_synth(args) -> int:
    if min(args.width, args.height) < 8:
        raise UsageError("fields need at least 8x8 samples")
    if not args.gamma >= 0 or not args.sigma > 0:
        raise UsageError("need gamma >= 0 and sigma > 0")
    field = bgm.synthesize_iss(args.width, args.height,
                               bgm.BackgroundModel(args.gamma, args.sigma ** 2), args.seed)
    grid.write_grid(field, args.output, dtype=args.dtype,
                    provenance=hm.provenance_block(_config(args)))
    _say(f"wrote {args.width}x{args.height} field (gamma {args.gamma}, sigma {args.sigma})")
    return EXIT_OK


def cmd_blend(args) -> int:
    bg = _load_raster(args.background)
    t = _load_raster(args.template)
    h, w = bg.shape
    ext = bgm.template_extent(t)
    if args.placements:
        pl = _read_truth(args.placements)
        spacing = None
    else:
        spacing = 2 * ext if args.min_spacing is None else args.min_spacing
        pl = bgm.random_placements(args.count, w, h, ext, spacing, seed=args.seed)
    img = bgm.blend_templates(bg, t, pl, args.amplitude)
    prov = hm.provenance_block(_config(args, min_spacing=spacing, extent=ext))
    grid.write_grid(img, args.output, provenance=prov)
    if args.placements_out:
        bgm.write_placements(pl, args.placements_out)
        _sidecar(args.placements_out, prov)
    _say(f"blended {len(pl)} copies")
    return EXIT_OK


def cmd_estimate_gamma(args) -> int:
    fields = [_load_raster(f) for f in args.fields]
    est = bgm.estimate_gamma(fields, args.scales)
    _say(f"gamma {est.gamma:.4f}")
    if args.output:
        doc = {"gamma": est.gamma, "intercept": est.intercept, "scales": list(est.scales),
               "log_variances": list(est.log_variances), "residual": est.residual,
               "provenance": hm.provenance_block(_config(args))}
        _write_json(args.output, doc)
    return EXIT_OK


def cmd_eval(args) -> int:
    amp = grid.read_grid(args.maps + ".amp")
    ang = grid.read_grid(args.maps + ".ang")
    if amp.shape != ang.shape:
        raise UsageError("amplitude and angle maps differ in size")
    truth = _read_truth(args.truth)
    if not truth:
        raise UsageError(f"{args.truth} lists no placements")
    M = int(amp.meta.get("provenance", {}).get("config", {}).get("m", 0)) or None
    maps = dt.ResponseMaps(amp, ang, M or 1, args.symmetry)
    rep = ev.evaluate(maps, truth, args.radius, keep_curves=True)
    _say(f"pr_auc {rep.pr_auc:.6f}  roc_auc {rep.roc_auc:.6f}  ang_err_deg {rep.mean_abs_angular_error:.4f}")
    prov = hm.provenance_block(_config(args))
    if args.output:
        _write_json(args.output, {"pr_auc": rep.pr_auc, "roc_auc": rep.roc_auc,
                                  "ang_err_deg": rep.mean_abs_angular_error, "provenance": prov})
    if args.curves:
        c = rep.curves
        with open(args.curves, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["threshold", "recall", "precision", "fpr", "tpr"])
            for i, thr in enumerate(c.thresholds):
                wr.writerow([repr(float(thr)), repr(float(c.pr[0][i + 1])), repr(float(c.pr[1][i + 1])),
                             repr(float(c.roc[0][i + 1])), repr(float(c.roc[1][i + 1]))])
        _sidecar(args.curves, prov)
        if not args.no_plot:
            from . import plots
            plots.plot_curves(c, str(Path(args.curves).with_suffix(".png")))
    return EXIT_OK


def cmd_sweep(args) -> int:
    t = _load_raster(args.template)
    if args.pad < 1:
        raise UsageError("--pad must be >= 1")
    for name in ("sigma", "gamma"):
        if any(not v >= 0 for v in getattr(args, name)):
            raise UsageError(f"--{name} values must be >= 0")
    if any(n < 0 for n in args.n) or any(m < 1 for m in args.m):
        raise UsageError("--n values must be >= 0 and --m values >= 1")
    r0 = hm.default_r0(t.shape) if args.r0 == "auto" else args.r0
    setup = ev.SweepSetup(template=t, width=args.width, height=args.height, count=args.count,
                          background_gamma=args.bg_gamma, amplitude=args.amplitude,
                          symmetry=args.symmetry, radius=args.radius, r0=r0,
                          pad_factor=args.pad, backend=args.backend)
    configs = ev.config_grid(args.sigma, args.n, args.m, args.gamma, args.whitening)
    seeds = list(range(args.seed, args.seed + args.seeds))

    def progress(row):
        _say(f"sigma {row['sigma']:g} N {row['N']} M {row['M']} gamma {row['gamma']:g} "
             f"whitening {int(row['whitening'])} seed {row['seed']}: pr_auc {row['pr_auc']:.4f} "
             f"roc_auc {row['roc_auc']:.4f}")

    rows = ev.sweep(configs, seeds, setup, timing=not args.no_timing, progress=progress)
    ev.write_sweep(rows, args.output)
    _sidecar(args.output, hm.provenance_block(_config(args, r0=r0, setup=setup.echo())))
    if not args.no_plot:
        from . import plots
        plots.plot_sweep(rows, str(Path(args.output).with_suffix(".png")))
    return EXIT_OK


def cmd_approx(args) -> int:
    t = _load_raster(args.template)
    if args.pad < 1:
        raise UsageError("--pad must be >= 1")
    r0 = hm.default_r0(t.shape) if args.r0 == "auto" else args.r0
    det = hm.learn_detector(t, args.n_max, r0=r0, pad_factor=args.pad, backend=args.backend)
    rows = []
    for n in range(args.n_max + 1):
        _, rmse = hm.approximate_template(hm.truncate_harmonics(det, n), t)
        rows.append({"N": n, "rmse": rmse})
    with open(args.output, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["N", "rmse"])
        for r in rows:
            wr.writerow([r["N"], repr(r["rmse"])])
    _sidecar(args.output, hm.provenance_block(_config(args, r0=r0)))
    if not args.no_plot:
        from . import plots
        plots.plot_approx(rows, str(Path(args.output).with_suffix(".png")), Path(args.template).name)
    for r in rows:
        _say(f"N {r['N']}  rmse {r['rmse']:.6g}")
    return EXIT_OK


COMMANDS = {
    "learn": cmd_learn, "detect": cmd_detect, "synth": cmd_synth, "blend": cmd_blend,
    "estimate-gamma": cmd_estimate_gamma, "eval": cmd_eval, "sweep": cmd_sweep,
    "approx": cmd_approx,
}


def _fail(kind: str, exc, code: int) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(f"steerdet: error: {kind}: {msg}", file=sys.stderr, flush=True)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    if args.threads:
        os.environ[grid.THREADS_ENV] = str(args.threads)
    threads = grid.default_workers()
    try:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    except (OSError, grid.GridFormatError) as exc:
        return _fail("io", exc, EXIT_USAGE)
    except (ValueError, ArithmeticError, MemoryError) as exc:
        return _fail("compute", exc, EXIT_COMPUTE)


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
