"""End-to-end acceptance checks. Each test prints one PASS/FAIL line.

The calibration experiments are expensive (about a minute per 256x256 scene
on one core), so results are computed once per session and shared.
"""
import csv
import filecmp
import math
import os
import time
from dataclasses import replace

import numpy as np
import pytest

import oracles
from stereomono.calibration import consistency_loss, count_local_minima, landscape_scan
from stereomono.cli import main
from stereomono.config import RunConfig
from stereomono.dataset import DecalSpec, build_dataset
from stereomono.defocus import DefocusModel, PsiRange, valid_depth_range
from stereomono.fusion import FusionPolicy, evaluate, fuse, pooled_mape_by_depth
from stereomono.geometry import Image, rotation_homography
from stereomono.pipeline import (calibrate_record, drift_baseline, fusion_inputs, mono_map, run_drift,
                                 select_records)
from stereomono.simulator import SceneSpec
from stereomono.stereo import CostVolume, MatcherConfig, compute_cost_volume, disparity_wta

pytestmark = pytest.mark.slow

SIZE = 256
LIBRARY = 30
N_CALIB = 10
N_ORDER = 5


def defocus_pair(cfg):
    return cfg.defocus_left.build(), cfg.defocus_right.build()


@pytest.fixture(scope="session")
def calib_corpus(tmp_path_factory):
    """Library of 7-degree decalibrated scenes; calibration frames chosen by mono coverage."""
    cfg = RunConfig()
    root = tmp_path_factory.mktemp("calib_corpus")
    spec = SceneSpec(width=SIZE, height=SIZE)
    man = build_dataset(LIBRARY, spec, cfg.stereo_rig(), defocus_pair(cfg), root, decal=DecalSpec("inplane", 7.0),
                        seed=100)
    return cfg, man, select_records(man, cfg, N_CALIB)


@pytest.fixture(scope="session")
def phase_rows(calib_corpus):
    cfg, man, recs = calib_corpus
    t0 = time.time()
    rows = [calibrate_record(man, r, cfg) for r in recs]
    return rows, (time.time() - t0) / len(recs)


def test_c1_psi_range(verdict):
    t0 = time.time()
    far = valid_depth_range(DefocusModel.from_coefficient(9.0, z_n=1.5), PsiRange(-4, 10))
    near = valid_depth_range(DefocusModel.from_coefficient(9.0, z_n=0.7), PsiRange(-4, 10))
    dt = time.time() - t0
    published = {"far": (far, (0.56, 4.5)), "near": (near, (0.39, 1.0))}
    errs = [abs(g - p) / p for got, pub in published.values() for g, p in zip(got, pub)]
    ok = max(errs) <= 0.02 and dt < 1.0
    verdict("C1 psi-range reproduction", ok,
            f"z_n=1.5 -> ({far[0]:.4f}, {far[1]:.4f}) m, z_n=0.7 -> ({near[0]:.4f}, {near[1]:.4f}) m, "
            f"max rel dev {max(errs):.2%} (tol 2%), {dt * 1e3:.1f} ms")


def test_c2_calibration_recovery(phase_rows, verdict):
    rows, per_scene = phase_rows
    ce = np.array([r.corner_err_px for r in rows])
    l1 = np.array([r.L1_vs_gt for r in rows])
    base = np.array([r.baseline_L1 for r in rows])
    ratio = l1.mean() / base.mean()
    ok = len(rows) >= 10 and np.isfinite(ce).all() and ce.mean() < 2.0 and ratio <= 1.3 and per_scene < 300
    verdict("C2 calibration recovery", ok,
            f"{len(rows)} scenes, mean corner error {ce.mean():.3f} px (tol < 2), "
            f"L1 {l1.mean():.4f} m vs never-decalibrated {base.mean():.4f} m = {ratio:.3f}x (tol <= 1.3), "
            f"{per_scene:.0f} s/scene; per-scene corner errors {np.round(ce, 3).tolist()}")


def test_c3_landscape_minimum(calib_corpus, verdict):
    cfg, man, recs = calib_corpus
    g1 = np.deg2rad(np.linspace(-10, 10, 21))
    g2 = np.deg2rad(np.linspace(-3, 3, 11))
    t0 = time.time()
    hits, minima = [], []
    for rec in recs[:5]:
        # calibrated pair: the clean rectified images
        left, right, gt_l, _ = man.load(rec, decalibrated=False)
        mono, _ = mono_map(gt_l, man.defocus_left, cfg.psi_range, cfg.mono, cfg.seed, f"calib-mono/{rec.index}")
        grid = landscape_scan((left, right), mono, man.rig, cfg.matcher, ("inplane", g1), ("pitch", g2), cfg.calib)
        i, j = np.unravel_index(np.argmin(grid), grid.shape)
        hits.append((i, j) == (10, 5))
        minima.append(count_local_minima(grid))
    dt = time.time() - t0
    ok = all(hits) and dt < 600
    verdict("C3 landscape minimum at (0, 0)", ok,
            f"{sum(hits)}/{len(hits)} scenes (21x11 grid), local minima per grid {minima}, {dt:.0f} s")


def test_c4_ordering(calib_corpus, phase_rows, verdict):
    cfg, man, recs = calib_corpus
    recs = recs[:N_ORDER]
    phase = np.mean([r.L1_vs_gt for r in phase_rows[0][:N_ORDER]])
    image = np.mean([calibrate_record(man, r, cfg, mono_mode="image_based").L1_vs_gt for r in recs])
    both_cfg = replace(cfg, calib=replace(cfg.calib, side="warp_both"))
    both = np.mean([calibrate_record(man, r, both_cfg).L1_vs_gt for r in recs])
    ok = phase <= image and phase <= both
    verdict("C4 phase-coded <= image-based and one-sided <= two-sided", ok,
            f"mean L1 over {len(recs)} scenes: phase-coded {phase:.4f} m, image-based {image:.4f} m; "
            f"one-sided {phase:.4f} m, two-sided {both:.4f} m")


@pytest.fixture(scope="session")
def fusion_corpus(tmp_path_factory):
    cfg = RunConfig()
    cfg = replace(cfg, mono=replace(cfg.mono, noise_sigma_psi=0.5))
    root = tmp_path_factory.mktemp("fusion_corpus")
    man = build_dataset(20, SceneSpec(width=SIZE, height=SIZE), cfg.stereo_rig(), defocus_pair(cfg), root, seed=200)
    return cfg, [fusion_inputs(man, rec, cfg) for rec in man.records]


def test_c5_fusion_dominance(fusion_corpus, verdict):
    cfg, frames = fusion_corpus

    def pooled(label, maps):
        preds = np.concatenate([m.ravel() for m in maps])
        gts = np.concatenate([f[3].ravel() for f in frames])
        return evaluate(preds, gts, label=label).rel_l1

    fused = [fuse(st, mo, cfg.fusion).depth for st, mo, _, _ in frames]
    r_fused = pooled("fused", fused)
    r_stereo = pooled("stereo", [f[0][0] for f in frames])
    r_mono = pooled("mono", [f[2] for f in frames])
    # oracle confidences: rank the sources by their true per-pixel error
    worst = 0.0
    for (zs, _), (zm, _), _, gt in frames:
        cs, cm = 1 / (1 + np.abs(zs - gt)), 1 / (1 + np.abs(zm - gt))
        z = fuse((zs, cs), (zm, cm), FusionPolicy("confidence")).depth
        both = np.isfinite(zs) & np.isfinite(zm)
        gap = np.abs(z - gt)[both] - np.minimum(np.abs(zs - gt), np.abs(zm - gt))[both]
        worst = max(worst, float(gap.max(initial=0.0)))
    ok = r_fused < r_stereo and r_fused < r_mono and worst <= 0.0
    verdict("C5 fusion dominance", ok,
            f"rel-L1 fused ({cfg.fusion.mode}) {r_fused:.4f} vs stereo {r_stereo:.4f} vs mono {r_mono:.4f} "
            f"({1 - r_fused / min(r_stereo, r_mono):.0%} better than the best single source); "
            f"oracle-confidence max excess error {worst:.1e}")


def test_c6_mape_crossover(fusion_corpus, verdict):
    _, frames = fusion_corpus
    near = (0.39, 1.0)
    far = (1.5, 6.0)
    rows = {}
    for name, z_range, n in (("near", near, 4), ("far", far, 3)):
        stereo = pooled_mape_by_depth([(f[0][0], f[3]) for f in frames], n, z_range)
        mono = pooled_mape_by_depth([(f[2], f[3]) for f in frames], n, z_range)
        rows[name] = [(c, ms, mm) for (c, ms, ns), (_, mm, nm) in zip(stereo, mono) if ns and nm]
    below = bool(rows["near"]) and all(mm < ms for _, ms, mm in rows["near"])
    above = bool(rows["far"]) and all(mm > ms for _, ms, mm in rows["far"])

    def fmt(r):
        return ", ".join(f"{c:.2f} m: mono {mm:.1f}% / stereo {ms:.1f}%" for c, ms, mm in r)

    verdict("C6 MAPE crossover", below and above,
            f"inside (0.39, 1.0) m [{fmt(rows['near'])}]; beyond 1.5 m [{fmt(rows['far'])}]")


def test_c7_oracle_equivalence(verdict):
    t0 = time.time()
    rng = np.random.default_rng(7)
    worst = {"consistency_loss": 0.0, "evaluate": 0.0, "cost_volume": 0.0, "parabola": 0.0}
    cases = 100
    for _ in range(cases):
        h, w = rng.integers(4, 12, 2)
        a = rng.uniform(0.3, 5, (h, w))
        b = a + rng.normal(0, 0.4, (h, w))
        a[rng.uniform(size=(h, w)) < 0.2] = np.nan
        b[rng.uniform(size=(h, w)) < 0.2] = np.nan
        for kind in ("L1", "relative_L1"):
            got, n = consistency_loss(a, b, kind)
            ref, n_ref = oracles.consistency_loss(a, b, kind)
            err = 0.0 if got == ref else abs(got - ref)
            worst["consistency_loss"] = max(worst["consistency_loss"], err if n == n_ref else math.inf)

        bins = [(0.3, 1.0), (1.0, 2.0), (2.0, 5.5)]
        rep = evaluate(b, a, bins)
        l1, rel, mape, n = oracles.evaluate(b, a, bins)
        errs = [abs(rep.l1 - l1), abs(rep.rel_l1 - rel)] if n else [0.0]
        for (_, _, m, k), (m_ref, k_ref) in zip(rep.mape_bins, mape):
            errs.append(math.inf if k != k_ref else (0.0 if k == 0 else abs(m - m_ref) / 100))
        worst["evaluate"] = max(worst["evaluate"], max(errs), 0.0 if rep.n_valid == n else math.inf)

        L, R = rng.uniform(size=(h, w)), rng.uniform(size=(h, w))
        vl, vr = rng.uniform(size=(h, w)) > 0.05, rng.uniform(size=(h, w)) > 0.05
        r, D = int(rng.integers(1, 3)), int(rng.integers(1, 6))
        cv = compute_cost_volume(Image(L, vl), Image(R, vr), MatcherConfig(block_radius=r, max_disp=D)).costs
        ref = oracles.cost_volume(L, R, vl, vr, D, r)
        same_mask = np.array_equal(cv >= oracles.LARGE, ref >= oracles.LARGE)
        ok = ref < oracles.LARGE
        worst["cost_volume"] = max(worst["cost_volume"],
                                   float(np.abs(cv[ok] - ref[ok]).max(initial=0)) if same_mask else math.inf)

        c = rng.uniform(5, 10, (12, 1, 1))
        k = int(rng.integers(1, 11))
        c[k] = rng.uniform(0, 1)
        d, _ = disparity_wta(CostVolume(c), MatcherConfig(uniqueness_ratio=1.0))
        expect = k + oracles.parabola_vertex(c[k - 1, 0, 0], c[k, 0, 0], c[k + 1, 0, 0])
        worst["parabola"] = max(worst["parabola"], abs(d[0, 0] - expect))
    dt = time.time() - t0
    ok = all(v <= 1e-9 for v in worst.values()) and dt < 30
    verdict("C7 oracle equivalence", ok,
            f"{cases} cases each, max abs error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
            + f" (tol 1e-9), {dt:.1f} s")


def _pipeline(out, jobs):
    common = ["--set", "scene.width=96", "--set", "scene.height=96", "--set", "calib.steps=4",
              "--seed", "3", "--jobs", str(jobs)]
    codes = [main(["simulate", "--count", "3", "--decalib", "inplane:-7..7deg", "-o", str(out / "data"), *common]),
             main(["calibrate", "--manifest", str(out / "data"), "-o", str(out / "calib"), *common]),
             main(["fuse", "--manifest", str(out / "data"), "-o", str(out / "fuse"), "--policy", "range_gated",
                   "--policy", "confidence", *common])]
    return codes


def _tree(root):
    return sorted(os.path.relpath(os.path.join(d, f), root) for d, _, fs in os.walk(root) for f in fs)


def _final_losses(root):
    with open(root / "calib" / "summary.csv") as f:
        return np.array([float(r["final_loss"]) for r in csv.DictReader(f)])


def test_c8_determinism(tmp_path, verdict):
    jobs = max(2, os.cpu_count() or 1)
    runs = {name: tmp_path / name for name in ("a1", "b1", "aN", "bN")}
    codes = {name: _pipeline(path, 1 if name.endswith("1") else jobs) for name, path in runs.items()}
    details, ok = [], all(c == [0, 0, 0] for c in codes.values())
    for a, b in (("a1", "b1"), ("aN", "bN")):
        names = _tree(runs[a])
        same = names == _tree(runs[b])
        _, mismatch, errors = filecmp.cmpfiles(runs[a], runs[b], names, shallow=False)
        ok &= same and not mismatch and not errors
        details.append(f"{len(names)} files byte-identical at {a[1:]} job(s): {same and not mismatch and not errors}")
    gap = float(np.max(np.abs(_final_losses(runs["a1"]) - _final_losses(runs["aN"]))))
    ok &= gap <= 1e-6
    verdict("C8 determinism", ok, "; ".join(details) + f"; final_loss gap 1 vs {jobs} jobs {gap:.1e} (tol 1e-6)")


@pytest.fixture(scope="session")
def drift_corpus(tmp_path_factory):
    cfg = RunConfig()
    root = tmp_path_factory.mktemp("drift_corpus")
    man = build_dataset(113, SceneSpec(width=SIZE, height=SIZE), cfg.stereo_rig(), defocus_pair(cfg), root, seed=300,
                        jobs=os.cpu_count())
    return cfg, man


def test_c9_drift_detection(drift_corpus, verdict):
    cfg, man = drift_corpus
    window, alpha, k = cfg.drift.window, 1.5, 100
    # baseline from a separate calibration-time session; the stream sees
    # 100 distinct clean scenes, then the decalibrated rig
    calib_session = replace(man, records=man.records[-10:])
    baseline = drift_baseline(calib_session, cfg)
    stream = replace(man, records=man.records[:k + window])
    h = rotation_homography("inplane", np.deg2rad(5), man.rig.intrinsics)
    rep = run_drift(stream, cfg, k + window, inject_at=k, h_inject=h, window=window, alpha=alpha, baseline=baseline)
    clean_alarms = sum(rep.alarms[:k])
    first = rep.first_alarm
    ok = clean_alarms == 0 and first is not None and k <= first < k + window
    peak = max(r / rep.baseline for r in rep.rolling[:k])
    verdict("C9 drift detection", ok,
            f"{clean_alarms} false alarms over {k} distinct clean frames (peak rolling/baseline {peak:.2f}, "
            f"alpha {alpha}); 5 deg injected at frame {k}, first alarm at {first} (window {window})")
