"""Stereo self-calibration against a monocular depth reference.

A projective warp of one image is optimized so that the stereo depth map agrees
with a monocular depth map of the camera that is *not* warped. The block
matcher is piecewise constant in the warp parameters, so the gradient is
estimated with central finite differences.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .defocus import DefocusModel, PsiRange, valid_depth_range
from .geometry import Homography, Intrinsics, compose, homography_from_params, rotation_homography, warp_image
from .stereo import DimensionMismatch, MatcherConfig, StereoRig, depth_to_disparity, match_stereo

log = logging.getLogger(__name__)

SIDES = ("warp_left", "warp_right", "warp_both")


class InsufficientOverlap(ValueError):
    pass


class NonInformativeReference(ValueError):
    pass


class NoProgress(RuntimeError):
    pass


class EmptyManifest(ValueError):
    pass


@dataclass(frozen=True)
class CalibConfig:
    side: str = "warp_right"
    loss_space: str = "disparity"
    loss_kind: str = "L1"
    steps: int = 100
    step_size: float = 0.015
    fd_epsilon: float = 1e-2
    optimizer: str = "adam_like"
    restarts: int = 1
    restart_sigma: float = 0.02
    seed: int = 0
    # mono reference is scale/shift-ambiguous (image-based engine)
    relative_reference: bool = False
    # truncated loss: mono-valid pixels without a stereo match cost this much;
    # None gives the plain masked mean, which rewards shrinking the overlap
    invalid_penalty: float | None = 3.0

    def __post_init__(self):
        if self.side not in SIDES:
            raise ValueError(f"side must be one of {SIDES}")
        if self.loss_space not in ("depth", "disparity"):
            raise ValueError("loss_space must be 'depth' or 'disparity'")
        if self.loss_kind not in ("L1", "relative_L1"):
            raise ValueError("loss_kind must be 'L1' or 'relative_L1'")
        if self.optimizer not in ("adam_like", "nelder_mead"):
            raise ValueError("optimizer must be 'adam_like' or 'nelder_mead'")
        if self.steps < 1 or self.fd_epsilon <= 0 or self.restarts < 1:
            raise ValueError("steps >= 1, fd_epsilon > 0 and restarts >= 1 required")
        if self.invalid_penalty is not None and not self.invalid_penalty > 0:
            raise ValueError("invalid_penalty must be positive or None")

    @property
    def reference(self) -> str:
        """Camera whose monocular map is the fixed reference."""
        return "right" if self.side == "warp_left" else "left"

    @property
    def n_params(self) -> int:
        return 16 if self.side == "warp_both" else 8


@dataclass
class CalibResult:
    homography: Homography
    loss_trace: list
    final_loss: float
    valid_overlap_fraction: float
    converged: bool
    initial_loss: float = float("nan")
    # only set for warp_both: the warp applied to the reference image
    reference_homography: Homography = field(default_factory=Homography.identity)
    evaluations: int = 0

    @property
    def improved(self) -> bool:
        return self.final_loss < self.initial_loss


def consistency_loss(mono: np.ndarray, stereo: np.ndarray, kind: str = "L1"):
    """Masked mean discrepancy over pixels valid in both maps.

    Returns (loss, n_valid); loss is +inf when fewer than 1% of pixels overlap.
    """
    if mono.shape != stereo.shape:
        raise DimensionMismatch(f"{mono.shape} vs {stereo.shape}")
    both = np.isfinite(mono) & np.isfinite(stereo)
    n = int(both.sum())
    if n < 0.01 * mono.size or n == 0:
        return float("inf"), n
    diff = np.abs(mono[both] - stereo[both])
    if kind == "L1":
        return float(diff.mean()), n
    if kind == "relative_L1":
        return float((diff / mono[both]).mean()), n
    raise ValueError(f"unknown loss kind {kind!r}")


def truncated_loss(mono: np.ndarray, stereo: np.ndarray, tau: float, kind: str = "L1"):
    """Mean over mono-valid pixels of min(|diff|, tau), with tau where stereo is missing.

    Returns (loss, n_both); +inf when fewer than 1% of pixels are jointly valid.
    """
    if mono.shape != stereo.shape:
        raise DimensionMismatch(f"{mono.shape} vs {stereo.shape}")
    vm = np.isfinite(mono)
    both = vm & np.isfinite(stereo)
    n = int(both.sum())
    if n < 0.01 * mono.size or n == 0:
        return float("inf"), n
    diff = np.abs(mono[both] - stereo[both])
    if kind == "relative_L1":
        diff = diff / mono[both]
    total = np.minimum(diff, tau).sum() + tau * (int(vm.sum()) - n)
    return float(total / vm.sum()), n


def fit_scale_shift(relative: np.ndarray, reference: np.ndarray) -> tuple[float, float]:
    both = np.isfinite(relative) & np.isfinite(reference)
    if both.sum() < 10:
        raise InsufficientOverlap(f"only {int(both.sum())} jointly valid pixels")
    x, y = relative[both], reference[both]
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    syy = np.sum((y - ym) ** 2)
    if sxx <= 1e-12 * max(1.0, xm * xm) * x.size or syy <= 1e-12 * max(1.0, ym * ym) * y.size:
        raise NonInformativeReference("zero variance, scale is undetermined")
    s = np.sum((x - xm) * (y - ym)) / sxx
    if s <= 0:
        raise NonInformativeReference(f"least-squares scale {s:.3g} is not positive")
    return float(s), float(ym - s * xm)


def align_scale_shift(relative: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Least-squares affine map of a relative depth map onto a metric reference."""
    s, t = fit_scale_shift(relative, reference)
    return s * relative + t


class Objective:
    """Calibration objective with normalized parameters for the optimizer.

    A normalized vector x holds offsets from identity of a homography expressed
    in centered coordinates scaled by half the larger image side, so every
    entry moves the frame corners by a comparable number of pixels.
    """

    def __init__(self, pair, mono_ref, rig: StereoRig, matcher_cfg: MatcherConfig, calib_cfg: CalibConfig):
        left, right = pair
        if left.samples.shape[:2] != right.samples.shape[:2] or mono_ref.shape != left.samples.shape[:2]:
            raise DimensionMismatch("images and reference must share dimensions")
        self.left, self.right = left, right
        self.mono_ref = np.asarray(mono_ref, dtype=np.float64)
        self.rig, self.matcher_cfg, self.cfg = rig, matcher_cfg, calib_cfg
        h, w = self.mono_ref.shape
        s = max(w, h) / 2.0
        self.N = np.array([[1 / s, 0, -(w - 1) / (2 * s)], [0, 1 / s, -(h - 1) / (2 * s)], [0, 0, 1.0]])
        self.Ninv = np.linalg.inv(self.N)
        if self.cfg.loss_space == "disparity":
            self.ref = depth_to_disparity(self.mono_ref, rig)
        else:
            self.ref = self.mono_ref
        self.evaluations = 0
        self.last_n_valid = 0

    def to_homography(self, x8) -> Homography:
        D = np.append(np.asarray(x8, dtype=np.float64), 0.0).reshape(3, 3)
        return Homography(self.Ninv @ (np.eye(3) + D) @ self.N)

    def to_normalized(self, h: Homography) -> np.ndarray:
        m = self.N @ h.m @ self.Ninv
        m = m / m[2, 2]
        return (m - np.eye(3)).ravel()[:8]

    def homographies(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.size == 16:
            return self.to_homography(x[:8]), self.to_homography(x[8:])
        return self.to_homography(x), None

    def loss_for(self, moving: Homography, reference: Homography | None = None) -> float:
        self.evaluations += 1
        left, right = self.left, self.right
        try:
            if self.cfg.side == "warp_left":
                left = warp_image(left, moving)
            else:
                right = warp_image(right, moving)
                if reference is not None:
                    left = warp_image(left, reference)
        except ValueError:
            return float("inf")
        z, _ = match_stereo(left, right, self.rig, self.matcher_cfg, reference=self.cfg.reference)
        est = depth_to_disparity(z, self.rig) if self.cfg.loss_space == "disparity" else z
        ref = self.ref
        if self.cfg.relative_reference:
            try:
                ref = align_scale_shift(ref, est)
            except (InsufficientOverlap, NonInformativeReference):
                self.last_n_valid = 0
                return float("inf")
        if self.cfg.invalid_penalty is None:
            loss, n = consistency_loss(ref, est, self.cfg.loss_kind)
        else:
            loss, n = truncated_loss(ref, est, self.cfg.invalid_penalty, self.cfg.loss_kind)
        self.last_n_valid = n
        return loss

    def __call__(self, x) -> float:
        moving, reference = self.homographies(x)
        return self.loss_for(moving, reference)

    def from_raw(self, h_params) -> float:
        """Objective at raw homography entries (8, or 16 for warp_both: moving then reference)."""
        p = np.asarray(h_params, dtype=np.float64).ravel()
        if p.size == 16:
            return self.loss_for(homography_from_params(p[:8]), homography_from_params(p[8:]))
        return self.loss_for(homography_from_params(p))


def calibration_objective(pair, h_params, mono_ref, rig, matcher_cfg, calib_cfg) -> float:
    """Consistency loss after warping the configured side by ``h_params``.

    ``mono_ref`` must be expressed in the frame of the camera that stays fixed.
    """
    return Objective(pair, mono_ref, rig, matcher_cfg, calib_cfg).from_raw(h_params)


def fd_gradient(f, x: np.ndarray, eps: float) -> np.ndarray:
    """Central finite differences, 2 evaluations per component."""
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = eps
        fp, fm = f(x + e), f(x - e)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            continue
        g[i] = (fp - fm) / (2 * eps)
    return g


def _converged(trace: list, patience: int = 10, tol: float = 1e-4) -> bool:
    if len(trace) <= patience:
        return False
    old, new = trace[-patience - 1], trace[-1]
    if not np.isfinite(old):
        return False
    return (old - new) < tol * max(abs(old), 1e-12)


def _adam(obj: Objective, x0: np.ndarray, cfg: CalibConfig):
    beta1, beta2, eps_adam = 0.9, 0.999, 1e-8
    x = x0.copy()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    fx = obj(x)
    best_x, best_f = x.copy(), fx
    trace = [fx]
    converged = False
    for t in range(1, cfg.steps + 1):
        g = fd_gradient(obj, x, cfg.fd_epsilon)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        # cosine decay from the initial rate
        lr = cfg.step_size * 0.5 * (1 + np.cos(np.pi * (t - 1) / cfg.steps))
        x = x - lr * mhat / (np.sqrt(vhat) + eps_adam)
        fx = obj(x)
        if fx < best_f:
            best_x, best_f = x.copy(), fx
        trace.append(best_f)
        # no early exit: the loss plateaus between accepted steps
        converged = converged or _converged(trace)
    return best_x, best_f, trace, converged


def _nelder_mead(obj: Objective, x0: np.ndarray, cfg: CalibConfig):
    cache: dict[bytes, float] = {}

    def f(x):
        key = np.asarray(x, dtype=np.float64).tobytes()
        if key not in cache:
            val = obj(x)
            cache[key] = val if np.isfinite(val) else 1e12
        return cache[key]

    f0 = f(x0)
    trace = [f0]

    def record(xk):
        trace.append(min(trace[-1], f(xk)))

    n = x0.size
    simplex = np.vstack([x0] + [x0 + cfg.step_size * 5 * np.eye(n)[i] for i in range(n)])
    res = optimize.minimize(f, x0, method="Nelder-Mead", callback=record,
                            options={"maxfev": cfg.steps * (2 * n + 1), "initial_simplex": simplex,
                                     "xatol": 1e-5, "fatol": 1e-7})
    best_x = np.asarray(res.x)
    best_f = f(best_x)
    if best_f > f0:
        best_x, best_f = x0, f0
    converged = bool(res.success) or _converged(trace)
    return best_x, best_f, trace, converged


def calibrate(pair, mono_ref, rig: StereoRig, matcher_cfg: MatcherConfig, cfg: CalibConfig = CalibConfig()) -> CalibResult:
    """Recover the rectifying warp, starting at identity.

    Multiple restarts perturb the start with seeded noise; the best final loss
    wins and is never worse than the identity loss.
    """
    ref_valid = np.isfinite(mono_ref).mean()
    if ref_valid < 0.05:
        raise InsufficientOverlap(f"mono reference valid on {ref_valid:.1%} of pixels (< 5%)")
    obj = Objective(pair, mono_ref, rig, matcher_cfg, cfg)
    rng = np.random.default_rng(cfg.seed)
    x_id = np.zeros(cfg.n_params)
    f_id = obj(x_id)
    best = (x_id, f_id, [f_id], False)
    for k in range(cfg.restarts):
        x0 = x_id if k == 0 else x_id + rng.normal(0, cfg.restart_sigma, x_id.size)
        run = _adam if cfg.optimizer == "adam_like" else _nelder_mead
        x, fx, trace, conv = run(obj, x0, cfg)
        log.debug("restart %d: loss %.6g -> %.6g in %d steps", k, trace[0], fx, len(trace) - 1)
        if fx < best[1] or k == 0:
            best = (x, fx, trace, conv)
    x, fx, trace, conv = best
    if fx > f_id:
        x, fx = x_id, f_id
    if not np.isfinite(fx):
        raise NoProgress("no finite consistency loss was reached; the reference and stereo never overlap")
    if not fx < f_id:
        log.warning("calibration did not improve on the identity warp (loss %.6g)", f_id)
    moving, reference = obj.homographies(x)
    final = obj(x)
    return CalibResult(
        homography=moving,
        loss_trace=[float(v) for v in trace],
        final_loss=float(final),
        valid_overlap_fraction=obj.last_n_valid / mono_ref.size,
        converged=conv,
        initial_loss=float(f_id),
        reference_homography=reference if reference is not None else Homography.identity(),
        evaluations=obj.evaluations,
    )


def parse_grid_axis(axis: str, angles_deg) -> tuple[str, np.ndarray]:
    return axis, np.deg2rad(np.asarray(angles_deg, dtype=np.float64))


def landscape_scan(pair, mono_ref, rig: StereoRig, matcher_cfg: MatcherConfig, axis1, axis2,
                   calib_cfg: CalibConfig = CalibConfig(), intrinsics: Intrinsics | None = None) -> np.ndarray:
    """Objective over a grid of two rotations (radians) applied to the moving image.

    ``axis1`` and ``axis2`` are (axis name, angle grid) pairs; both grids must
    contain 0. Entry [i, j] uses rotation axis1[i] composed after axis2[j].
    """
    (ax1, g1), (ax2, g2) = axis1, axis2
    g1, g2 = np.asarray(g1, dtype=np.float64), np.asarray(g2, dtype=np.float64)
    if g1.size == 0 or g2.size == 0:
        raise ValueError("angle grids must be non-empty")
    if not (np.any(np.isclose(g1, 0.0, atol=1e-12)) and np.any(np.isclose(g2, 0.0, atol=1e-12))):
        raise ValueError("angle grids must contain 0")
    h, w = mono_ref.shape
    k = intrinsics or rig.intrinsics or Intrinsics.default_for(w, h)
    obj = Objective(pair, mono_ref, rig, matcher_cfg, calib_cfg)
    out = np.empty((g1.size, g2.size))
    for i, a in enumerate(g1):
        for j, b in enumerate(g2):
            hm = compose(rotation_homography(ax1, a, k), rotation_homography(ax2, b, k))
            out[i, j] = obj.loss_for(hm, Homography.identity() if calib_cfg.side == "warp_both" else None)
    return out


def count_local_minima(grid: np.ndarray) -> int:
    """Cells strictly below all their 4-neighbours."""
    g = np.where(np.isfinite(grid), grid, np.inf)
    padded = np.pad(g, 1, constant_values=np.inf)
    c = padded[1:-1, 1:-1]
    is_min = (c < padded[:-2, 1:-1]) & (c < padded[2:, 1:-1]) & (c < padded[1:-1, :-2]) & (c < padded[1:-1, 2:])
    return int(is_min.sum())


def in_range_fraction(depth: np.ndarray, m: DefocusModel, r: PsiRange = PsiRange()) -> float:
    z_near, z_far = valid_depth_range(m, r)
    ok = np.isfinite(depth)
    if not ok.any():
        return 0.0
    inside = ok & (depth >= z_near) & (depth <= z_far)
    return float(inside.sum() / ok.sum())


def select_calibration_frames(depths, m: DefocusModel, r: PsiRange = PsiRange(), k: int = 1):
    """Rank frames by the fraction of valid pixels the phase-coded engine covers.

    ``depths`` is a sequence of depth maps (ground truth or estimates) in
    record order. Returns up to k (index, fraction) pairs, best first; ties keep
    record order.
    """
    depths = list(depths)
    if not depths:
        raise EmptyManifest("no records to choose from")
    scored = [(i, in_range_fraction(d, m, r)) for i, d in enumerate(depths)]
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[:k]


DRIFT_STATISTICS = ("median_inverse_depth", "mean_depth_L1")


def drift_frame_loss(mono: np.ndarray, stereo: np.ndarray, statistic: str = "median_inverse_depth",
                     min_depth: float = 0.0) -> float:
    """Per-frame mono/stereo disagreement for drift monitoring.

    ``median_inverse_depth`` is the median of |1/z_mono - 1/z_stereo|, which
    is proportional to a disparity error and insensitive to the occasional
    mismatch; ``mean_depth_L1`` is the plain consistency loss. Mono pixels
    nearer than ``min_depth`` (where stereo cannot measure) are ignored.
    +inf when fewer than 1% of pixels are jointly valid.
    """
    if statistic not in DRIFT_STATISTICS:
        raise ValueError(f"statistic must be one of {DRIFT_STATISTICS}")
    if min_depth > 0:
        mono = np.where(mono >= min_depth, mono, np.nan)
    if statistic == "mean_depth_L1":
        return consistency_loss(mono, stereo)[0]
    loss, n = consistency_loss(mono, stereo)
    if not np.isfinite(loss):
        return loss
    both = np.isfinite(mono) & np.isfinite(stereo)
    return float(np.median(np.abs(1.0 / mono[both] - 1.0 / stereo[both])))


@dataclass
class DriftReport:
    losses: list
    rolling: list
    alarms: list
    baseline: float
    alpha: float
    skipped: list = field(default_factory=list)

    @property
    def first_alarm(self):
        for i, a in enumerate(self.alarms):
            if a:
                return i
        return None


class DriftMonitor:
    """Rolling consistency monitor; alarms when the window mean exceeds alpha x baseline.

    Frames whose mono map covers less than ``min_mono_coverage`` of the image
    carry no information about the rig and are skipped: they do not enter the
    window and never raise an alarm.
    """

    def __init__(self, baseline: float, window: int = 3, alpha: float = 1.5,
                 statistic: str = "median_inverse_depth", min_depth: float = 0.0, min_mono_coverage: float = 0.05):
        if window < 1:
            raise ValueError("window must be >= 1")
        if statistic not in DRIFT_STATISTICS:
            raise ValueError(f"statistic must be one of {DRIFT_STATISTICS}")
        self.baseline, self.window, self.alpha = baseline, window, alpha
        self.statistic, self.min_depth, self.min_mono_coverage = statistic, min_depth, min_mono_coverage
        self.losses: list[float] = []
        self.used: list[float] = []

    def informative(self, mono: np.ndarray) -> bool:
        valid = np.isfinite(mono) & (mono >= self.min_depth)
        return bool(valid.mean() >= self.min_mono_coverage)

    def update(self, mono: np.ndarray, stereo: np.ndarray) -> tuple[float, bool, bool]:
        """(rolling score, alarm, skipped) after one frame."""
        loss = drift_frame_loss(mono, stereo, self.statistic, self.min_depth)
        self.losses.append(loss)
        skipped = not self.informative(mono)
        if not skipped:
            self.used.append(loss)
        if not self.used:
            return float("nan"), False, skipped
        score = float(np.mean(self.used[-self.window:]))
        return score, bool(score > self.alpha * self.baseline) and not skipped, skipped


def drift_baseline_loss(pairs, statistic: str = "median_inverse_depth", min_depth: float = 0.0,
                        min_mono_coverage: float = 0.05) -> float:
    """Mean per-frame loss over informative calibration-time (mono, stereo) pairs."""
    mon = DriftMonitor(0.0, 1, 1.0, statistic, min_depth, min_mono_coverage)
    vals = [drift_frame_loss(m, z, statistic, min_depth) for m, z in pairs if mon.informative(m)]
    vals = [v for v in vals if np.isfinite(v)]
    return float(np.mean(vals)) if vals else float("inf")


def drift_score(stream, window: int, baseline: float, alpha: float = 1.5, statistic: str = "median_inverse_depth",
                min_depth: float = 0.0, min_mono_coverage: float = 0.05) -> DriftReport:
    mon = DriftMonitor(baseline, window, alpha, statistic, min_depth, min_mono_coverage)
    rolling, alarms, skipped = [], [], []
    for mono, stereo in stream:
        score, alarm, skip = mon.update(mono, stereo)
        rolling.append(score)
        alarms.append(alarm)
        skipped.append(skip)
    return DriftReport(mon.losses, rolling, alarms, baseline, alpha, skipped)
