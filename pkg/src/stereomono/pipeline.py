"""Per-record pipeline steps shared by the CLI, scripts and acceptance tests."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .calibration import (CalibResult, DriftReport, InsufficientOverlap, NonInformativeReference, NoProgress,
                          calibrate, drift_baseline_loss, drift_score, select_calibration_frames)
from .config import RunConfig, derive_seed
from .dataset import DatasetManifest, Record
from .defocus import DefocusModel, MonoSimSpec, PsiRange, simulate_mono_depth
from .fusion import evaluate, fuse, masked_rel_l1
from .geometry import Homography, Image, corner_error, invert, warp_image
from .stereo import match_stereo

log = logging.getLogger(__name__)


def mono_map(gt: np.ndarray, model: DefocusModel, r: PsiRange, spec: MonoSimSpec, seed: int, tag: str):
    """Simulated monocular (depth, confidence) with a seed derived from ``tag``."""
    return simulate_mono_depth(gt, model, r, replace(spec, rng_seed=derive_seed(seed, tag)))


def rectify(left: Image, right: Image, res: CalibResult, side: str):
    if side == "warp_left":
        return warp_image(left, res.homography), right
    if side == "warp_both":
        return warp_image(left, res.reference_homography), warp_image(right, res.homography)
    return left, warp_image(right, res.homography)


def select_records(man: DatasetManifest, cfg: RunConfig, k: int) -> list[Record]:
    """The k records whose reference view the mono engine covers best."""
    ref_view = cfg.calib.reference
    model = man.defocus_left if ref_view == "left" else man.defocus_right
    depths = (man.load(rec)[2 if ref_view == "left" else 3] for rec in man.records)
    picked = select_calibration_frames(depths, model, cfg.psi_range, k)
    return [man.records[i] for i, _ in picked]


@dataclass
class CalibRow:
    record: int
    init_loss: float
    final_loss: float
    L1_vs_gt: float
    relL1_vs_gt: float
    corner_err_px: float
    baseline_L1: float
    result: CalibResult | None = None
    error: str = ""


def calibrate_record(man: DatasetManifest, rec: Record, cfg: RunConfig, mono_mode: str | None = None) -> CalibRow:
    """Calibrate one record against the mono map of the camera that stays fixed."""
    calib = cfg.calib
    mono_spec = cfg.mono if mono_mode is None else replace(cfg.mono, mode=mono_mode)
    if mono_spec.mode == "image_based" and not calib.relative_reference:
        calib = replace(calib, relative_reference=True)
    rig = man.rig
    left, right, gt_l, gt_r = man.load(rec)
    clean_l, clean_r, _, _ = man.load(rec, decalibrated=False)
    ref_view = calib.reference
    gt_ref = gt_l if ref_view == "left" else gt_r
    model = man.defocus_left if ref_view == "left" else man.defocus_right
    mono, _ = mono_map(gt_ref, model, cfg.psi_range, mono_spec, cfg.seed, f"calib-mono/{rec.index}")
    z0, _ = match_stereo(clean_l, clean_r, rig, cfg.matcher, reference=ref_view)
    base = float(np.nanmean(np.abs(z0 - gt_ref)))
    try:
        res = calibrate((left, right), mono, rig, cfg.matcher, replace(calib, seed=derive_seed(cfg.seed, f"calib/{rec.index}")))
    except (NoProgress, InsufficientOverlap, NonInformativeReference) as e:
        nan = float("nan")
        return CalibRow(rec.index, nan, nan, nan, nan, nan, base, None, str(e))
    lw, rw = rectify(left, right, res, calib.side)
    z, _ = match_stereo(lw, rw, rig, cfg.matcher, reference=ref_view)
    rep = evaluate(z, gt_ref)
    h_true = man.decalibration(rec)
    ce = float("nan")
    if h_true is not None and calib.side != "warp_both" and rec.decalibrated_view == ("left" if calib.side == "warp_left" else "right"):
        ce = corner_error(res.homography, invert(h_true), gt_ref.shape[1], gt_ref.shape[0])
    elif h_true is None:
        ce = corner_error(res.homography, Homography.identity(), gt_ref.shape[1], gt_ref.shape[0])
    return CalibRow(rec.index, res.initial_loss, res.final_loss, rep.l1, rep.rel_l1, ce, base, res)


def calib_result_text(res: CalibResult) -> str:
    lines = ["homography_params: [" + ", ".join(repr(float(v)) for v in res.homography.params) + "]"]
    if not np.allclose(res.reference_homography.m, np.eye(3)):
        lines.append("reference_homography_params: [" + ", ".join(repr(float(v)) for v in res.reference_homography.params) + "]")
    lines += [f"initial_loss: {res.initial_loss!r}", f"final_loss: {res.final_loss!r}",
              f"valid_overlap_fraction: {res.valid_overlap_fraction!r}", f"converged: {str(res.converged).lower()}",
              f"evaluations: {res.evaluations}", f"steps: {len(res.loss_trace) - 1}"]
    return "\n".join(lines) + "\n"


@dataclass
class FuseOutput:
    record: int
    results: dict  # policy mode -> FusionResult
    reports: list  # EvalReport per source / policy
    masked: dict  # label -> (rel_l1 inside the mono range, n)


def fusion_inputs(man: DatasetManifest, rec: Record, cfg: RunConfig):
    """Right-frame stereo and mono (depth, confidence) maps, a mono-only map and gt.

    The mono engine drops out-of-range pixels, which is what fusion consumes.
    The mono-only baseline comes from the same draw in saturating mode so it
    covers the whole frame; the two agree on every in-range pixel.
    """
    left, right, _, gt_r = man.load(rec, decalibrated=False)
    zs, cs = match_stereo(left, right, man.rig, cfg.matcher, reference="right")
    tag = f"fuse-mono/{rec.index}"
    zm, cm = mono_map(gt_r, man.defocus_right, cfg.psi_range, replace(cfg.mono, out_of_range="invalid"), cfg.seed, tag)
    full, _ = mono_map(gt_r, man.defocus_right, cfg.psi_range, replace(cfg.mono, out_of_range="saturate"), cfg.seed, tag)
    return (zs, cs), (zm, cm), full, gt_r


def fuse_record(man: DatasetManifest, rec: Record, cfg: RunConfig, policies=None, bins=()) -> FuseOutput:
    stereo, mono, mono_only, gt = fusion_inputs(man, rec, cfg)
    policies = policies or [cfg.fusion]
    z_range = cfg.fusion.mono_range
    reports = [evaluate(stereo[0], gt, bins, "stereo"), evaluate(mono_only, gt, bins, "mono")]
    masked = {r.label: masked_rel_l1(m, gt, z_range) for r, m in zip(reports, (stereo[0], mono_only))}
    results = {}
    for pol in policies:
        fr = fuse(stereo, mono, pol)
        results[pol.mode] = fr
        label = f"fused_{pol.mode}"
        reports.append(evaluate(fr.depth, gt, bins, label))
        masked[label] = masked_rel_l1(fr.depth, gt, z_range)
    return FuseOutput(rec.index, results, reports, masked)


def drift_stream(man: DatasetManifest, cfg: RunConfig, frames: int, inject_at: int | None, h_inject: Homography | None):
    """(mono, stereo) depth pairs for a clean stream cycling through the records.

    From ``inject_at`` on the moving view is warped by ``h_inject``.
    """
    ref_view = cfg.calib.reference
    for t in range(frames):
        rec = man.records[t % len(man.records)]
        left, right, gt_l, gt_r = man.load(rec, decalibrated=False)
        if inject_at is not None and t >= inject_at and h_inject is not None:
            if cfg.calib.side == "warp_left":
                left = warp_image(left, h_inject)
            else:
                right = warp_image(right, h_inject)
        gt_ref = gt_l if ref_view == "left" else gt_r
        model = man.defocus_left if ref_view == "left" else man.defocus_right
        mono, _ = mono_map(gt_ref, model, cfg.psi_range, cfg.mono, cfg.seed, f"drift-mono/{t}")
        z, _ = match_stereo(left, right, man.rig, cfg.matcher, reference=ref_view)
        yield mono, z


def drift_min_depth(man: DatasetManifest, cfg: RunConfig) -> float:
    """Nearest depth the matcher can report, with the configured margin."""
    return cfg.drift.near_margin * man.rig.fb / cfg.matcher.max_disp


def drift_baseline(man: DatasetManifest, cfg: RunConfig, n: int | None = None) -> float:
    """Mean drift loss over clean calibration-time frames."""
    n = len(man.records) if n is None else n
    d = cfg.drift
    return drift_baseline_loss(drift_stream(man, cfg, n, None, None), d.statistic, drift_min_depth(man, cfg),
                               d.min_mono_coverage)


def run_drift(man: DatasetManifest, cfg: RunConfig, frames: int, inject_at=None, h_inject=None,
              window=None, alpha=None, baseline=None) -> DriftReport:
    window = cfg.drift.window if window is None else window
    alpha = cfg.drift.alpha if alpha is None else alpha
    if baseline is None:
        baseline = drift_baseline(man, cfg)
    d = cfg.drift
    return drift_score(drift_stream(man, cfg, frames, inject_at, h_inject), window, baseline, alpha, d.statistic,
                       drift_min_depth(man, cfg), d.min_mono_coverage)
