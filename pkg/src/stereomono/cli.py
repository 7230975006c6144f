"""Command line entry point: simulate, calibrate, landscape, fuse, drift."""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from . import pipeline
from .calibration import landscape_scan
from .config import ConfigError, RunConfig, apply_overrides, describe_defaults, dump_config, load_config
from .dataset import ManifestError, build_dataset, parse_decal, read_manifest
from .fusion import MODES, inverse_depth_bins, reports_to_csv
from .geometry import AXES
from .io import write_label_png, write_pfm
from .simulator import SceneSpec

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_PARTIAL = 0, 2, 3, 4
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}

log = logging.getLogger("stereomono")


class UsageError(ValueError):
    pass


def setup_logging():
    name = os.environ.get("MONSTER_LOG", "warn").strip().lower()
    logging.basicConfig(level=LOG_LEVELS.get(name, logging.WARNING), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    if name not in LOG_LEVELS:
        log.warning("MONSTER_LOG=%r not understood, using warn", name)


def parse_grid(text: str):
    """``axis:lo:hi:count`` in degrees -> (axis, angles in degrees)."""
    parts = text.split(":")
    if len(parts) != 4 or parts[0] not in AXES:
        raise UsageError(f"grid {text!r} must look like inplane:-10:10:21")
    try:
        lo, hi, n = float(parts[1]), float(parts[2]), int(parts[3])
    except ValueError as e:
        raise UsageError(f"grid {text!r}: {e}") from e
    if n < 1:
        raise UsageError(f"grid {text!r}: count must be >= 1")
    grid = np.linspace(lo, hi, n)
    zero = np.isclose(grid, 0.0, atol=1e-9 * max(1.0, abs(hi - lo)))
    if not zero.any():
        raise UsageError(f"grid {text!r} does not contain 0")
    grid[zero] = 0.0
    return parts[0], grid


def _run(fn, tasks, jobs: int):
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, tasks))
    return [fn(t) for t in tasks]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v) if np.isfinite(v) else "nan"
    return str(v)


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _select_records(man, spec: str | None):
    if not spec:
        return list(man.records)
    wanted = set()
    for part in spec.split(","):
        if "-" in part:
            a, b = part.split("-")
            wanted.update(range(int(a), int(b) + 1))
        else:
            wanted.add(int(part))
    return [r for r in man.records if r.index in wanted]


# command implementations -------------------------------------------------

def cmd_simulate(cfg: RunConfig, args) -> int:
    decal = parse_decal(args.decalib) if args.decalib else None
    sc = cfg.scene
    spec = SceneSpec(width=sc.width, height=sc.height, depth_range=sc.depth_range, texture=sc.texture,
                     n_objects=sc.n_objects)
    view = args.decalib_view or ("left" if cfg.calib.side == "warp_left" else "right")
    out = Path(cfg.output_dir)
    man = build_dataset(args.count, spec, cfg.stereo_rig(), (cfg.defocus_left.build(), cfg.defocus_right.build()),
                        out, decal=decal, seed=cfg.seed, view=view, sensor_noise=cfg.sensor_noise, jobs=args.jobs)
    print(f"wrote {len(man.records)} records to {out}")
    return EXIT_OK


def _calib_task(t):
    man, rec, cfg, mono = t
    return pipeline.calibrate_record(man, rec, cfg, mono)


def cmd_calibrate(cfg: RunConfig, args) -> int:
    man = read_manifest(args.manifest)
    recs = _select_records(man, args.records)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = _run(_calib_task, [(man, r, cfg, args.mono) for r in recs], args.jobs)
    failed = 0
    for row in rows:
        stem = out / f"record_{row.record:04d}"
        if row.result is None:
            failed += 1
            log.error("record %d: %s", row.record, row.error)
            stem.with_suffix(".txt").write_text(f"error: {row.error}\n")
            continue
        stem.with_suffix(".txt").write_text(pipeline.calib_result_text(row.result))
        _write_csv(out / f"record_{row.record:04d}_trace.csv", ["step", "loss"], enumerate(row.result.loss_trace))
    header = ["record", "init_loss", "final_loss", "L1_vs_gt", "relL1_vs_gt", "corner_err_px"]
    _write_csv(out / "summary.csv", header,
               [(r.record, r.init_loss, r.final_loss, r.L1_vs_gt, r.relL1_vs_gt, r.corner_err_px) for r in rows])
    for r in rows:
        print(f"record {r.record}: loss {r.init_loss:.4g} -> {r.final_loss:.4g}, L1 vs gt {r.L1_vs_gt:.4f} m "
              f"(never-decalibrated baseline {r.baseline_L1:.4f}), corner error {r.corner_err_px:.3f} px")
    return EXIT_PARTIAL if failed else EXIT_OK


def heatmap_png(path: Path, grid: np.ndarray, scale: int = 12):
    """Colormapped grid (dark = low); non-finite cells are grey."""
    g = np.asarray(grid, dtype=np.float64)
    fin = np.isfinite(g)
    lo, hi = (g[fin].min(), g[fin].max()) if fin.any() else (0.0, 1.0)
    t = np.where(fin, (g - lo) / (hi - lo) if hi > lo else 0.0, 0.0)
    anchors = np.array([[68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37]], dtype=np.float64)
    pos = np.linspace(0, 1, len(anchors))
    rgb = np.stack([np.interp(t, pos, anchors[:, c]) for c in range(3)], axis=-1)
    rgb[~fin] = 128
    rgb = np.repeat(np.repeat(rgb, scale, axis=0), scale, axis=1)
    PILImage.fromarray(np.rint(rgb).astype(np.uint8)).save(path)


def cmd_landscape(cfg: RunConfig, args) -> int:
    ax1, g1 = parse_grid(args.axis1)
    ax2, g2 = parse_grid(args.axis2)
    man = read_manifest(args.manifest)
    recs = _select_records(man, str(args.record))
    if not recs:
        raise UsageError(f"record {args.record} not in manifest")
    rec = recs[0]
    left, right, gt_l, gt_r = man.load(rec, decalibrated=args.decalibrated)
    ref = cfg.calib.reference
    gt_ref = gt_l if ref == "left" else gt_r
    model = man.defocus_left if ref == "left" else man.defocus_right
    spec = cfg.mono if args.mono is None else replace(cfg.mono, mode=args.mono)
    calib = replace(cfg.calib, relative_reference=cfg.calib.relative_reference or spec.mode == "image_based")
    mono, _ = pipeline.mono_map(gt_ref, model, cfg.psi_range, spec, cfg.seed, f"calib-mono/{rec.index}")
    grid = landscape_scan((left, right), mono, man.rig, cfg.matcher, (ax1, np.deg2rad(g1)), (ax2, np.deg2rad(g2)),
                          calib)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = out / f"landscape_record_{rec.index:04d}"
    rows = [(a, b, grid[i, j]) for i, a in enumerate(g1) for j, b in enumerate(g2)]
    _write_csv(stem.with_suffix(".csv"), [f"{ax1}_deg", f"{ax2}_deg", "loss"], rows)
    heatmap_png(stem.with_suffix(".png"), grid)
    i, j = np.unravel_index(np.nanargmin(np.where(np.isfinite(grid), grid, np.nan)), grid.shape)
    print(f"minimum {grid[i, j]:.6g} at {ax1}={g1[i]:g} deg, {ax2}={g2[j]:g} deg")
    return EXIT_OK


def _fuse_task(t):
    man, rec, cfg, policies, bins = t
    return pipeline.fuse_record(man, rec, cfg, policies, bins)


def cmd_fuse(cfg: RunConfig, args) -> int:
    man = read_manifest(args.manifest)
    recs = _select_records(man, args.records)
    modes = args.policy or [cfg.fusion.mode]
    policies = [replace(cfg.fusion, mode=m) for m in dict.fromkeys(modes)]
    lo, hi = cfg.scene.depth_range
    bins = inverse_depth_bins(args.bins, (lo, hi))
    bins[-1] = (bins[-1][0], float(np.nextafter(hi, np.inf)))
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    outs = _run(_fuse_task, [(man, r, cfg, policies, bins) for r in recs], args.jobs)
    reports, masked_rows = [], []
    for o in outs:
        for mode, fr in o.results.items():
            write_pfm(out / f"record_{o.record:04d}_fused_{mode}.pfm", fr.depth)
            write_label_png(out / f"record_{o.record:04d}_source_{mode}.png", fr.source_mask)
        for rep in o.reports:
            rep.label = f"record_{o.record:04d}/{rep.label}"
            reports.append(rep)
        for label, (v, n) in o.masked.items():
            masked_rows.append((o.record, label, v, n))
    (out / "report.csv").write_text(reports_to_csv(reports))
    z0, z1 = cfg.fusion.mono_range
    _write_csv(out / "report_masked.csv", ["record", "label", f"rel_l1_gt_in_[{z0:.4f},{z1:.4f}]", "count"], masked_rows)
    # corpus summary, pixel-weighted over records
    summary = {}
    for rep in reports:
        name = rep.label.split("/", 1)[1]
        s = summary.setdefault(name, [0.0, 0.0, 0])
        if rep.n_valid:
            s[0] += rep.l1 * rep.n_valid
            s[1] += rep.rel_l1 * rep.n_valid
            s[2] += rep.n_valid
    lines = [f"masked metric applies both bounds of the mono range [{z0:.4f}, {z1:.4f}] m"]
    for name, (l1, rl1, n) in summary.items():
        lines.append(f"{name}: L1 {l1 / max(n, 1):.4f} m, rel-L1 {rl1 / max(n, 1):.4f} over {n} px")
    lines += ["", *[rep.to_text() for rep in reports]]
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines[:len(summary) + 1]))
    return EXIT_OK


def cmd_drift(cfg: RunConfig, args) -> int:
    man = read_manifest(args.manifest)
    if not man.records:
        raise ManifestError("manifest has no records")
    h = None
    if args.inject:
        h = parse_decal(args.inject).homography(man.rig.intrinsics, np.random.default_rng(cfg.seed))
    window = args.window if args.window is not None else cfg.drift.window
    if window < 1:
        raise UsageError("--window must be >= 1")
    alpha = args.alpha if args.alpha is not None else cfg.drift.alpha
    frames = args.frames if args.frames is not None else cfg.drift.frames
    rep = pipeline.run_drift(man, cfg, frames, args.inject_at if h is not None else None, h, window, alpha)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "drift.csv", ["frame", "loss", "rolling", "alarm", "skipped"],
               [(i, l, r, int(a), int(k)) for i, (l, r, a, k)
                in enumerate(zip(rep.losses, rep.rolling, rep.alarms, rep.skipped))])
    first = rep.first_alarm
    (out / "alarm.txt").write_text(f"statistic: {cfg.drift.statistic}\nbaseline: {rep.baseline!r}\nalpha: {alpha!r}\n"
                                   f"window: {window}\nalarm_frame: {'none' if first is None else first}\n")
    print(f"alarm frame: {'none' if first is None else first}")
    return EXIT_OK


# argument parsing --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    epilog = "config keys and defaults (set in the YAML file or with --set section.key=value):\n" + describe_defaults()
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="YAML run config (unknown keys are errors)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. --set calib.steps=50")
    common.add_argument("-o", "--out", help="output directory (overrides output_dir)")
    common.add_argument("--seed", type=int, help="global seed (overrides seed)")
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker processes (default: cores)")

    p = argparse.ArgumentParser(prog="stereomono", description="Mono/stereo depth fusion and self-calibration.",
                                epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)
    kw = dict(parents=[common], epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)

    s = sub.add_parser("simulate", help="render a synthetic dataset", **kw)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--decalib", help="inplane:7deg, pitch:2deg, inplane:-7..7deg or params:a,b,c,d,e,f,g,h")
    s.add_argument("--decalib-view", choices=("left", "right"), help="view to decalibrate (default: the warped side)")

    s = sub.add_parser("calibrate", help="self-calibrate every record of a manifest", **kw)
    s.add_argument("--manifest", required=True)
    s.add_argument("--mono", choices=("phase_coded", "image_based"), help="mono engine (default: mono.mode)")
    s.add_argument("--records", help="subset such as 0,2,5-7")

    s = sub.add_parser("landscape", help="scan the loss over two rotation axes", **kw)
    s.add_argument("--manifest", required=True)
    s.add_argument("--record", type=int, default=0)
    s.add_argument("--axis1", default="inplane:-10:10:21")
    s.add_argument("--axis2", default="pitch:-3:3:11")
    s.add_argument("--mono", choices=("phase_coded", "image_based"))
    s.add_argument("--decalibrated", action="store_true", help="scan the decalibrated pair instead of the clean one")

    s = sub.add_parser("fuse", help="fuse mono and stereo depth and evaluate", **kw)
    s.add_argument("--manifest", required=True)
    s.add_argument("--policy", action="append", choices=MODES, help="repeat to emit several policies")
    s.add_argument("--records")
    s.add_argument("--bins", type=int, default=12, help="inverse-depth MAPE bins")

    s = sub.add_parser("drift", help="monitor consistency and raise a drift alarm", **kw)
    s.add_argument("--manifest", required=True)
    s.add_argument("--inject-at", type=int, default=0)
    s.add_argument("--inject", help="decalibration injected from --inject-at on, e.g. inplane:5deg")
    s.add_argument("--window", type=int)
    s.add_argument("--alpha", type=float)
    s.add_argument("--frames", type=int)
    return p


COMMANDS = {"simulate": cmd_simulate, "calibrate": cmd_calibrate, "landscape": cmd_landscape,
            "fuse": cmd_fuse, "drift": cmd_drift}


def main(argv=None) -> int:
    setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        cfg = apply_overrides(cfg, args.set)
        if args.out:
            cfg = replace(cfg, output_dir=args.out)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        if getattr(args, "count", 1) < 1:
            raise UsageError("--count must be >= 1")
        log.debug("effective config:\n%s", dump_config(cfg))
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ManifestError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        # remaining precondition failures (bad decalibration spec, grids, ...)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
