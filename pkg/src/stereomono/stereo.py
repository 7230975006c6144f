"""Classical block-matching stereo.

Cost volumes are stored as ``costs[d, y, x]`` for d = 0..max_disp, comparing
the left window at (x, y) with the right window at (x - d, y). Disparity and
depth maps are float arrays with NaN marking invalid pixels.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .geometry import Image, Intrinsics

LARGE = 1e9


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class StereoRig:
    baseline: float = 0.1
    focal_px: float = 256.0
    intrinsics: Intrinsics = field(default_factory=lambda: Intrinsics(256.0, 256.0, 127.5, 127.5))

    def __post_init__(self):
        if self.baseline <= 0 or self.focal_px <= 0:
            raise ValueError("baseline and focal_px must be positive")

    @classmethod
    def for_image(cls, width: int, height: int, baseline: float = 0.1) -> "StereoRig":
        k = Intrinsics.default_for(width, height)
        return cls(baseline=baseline, focal_px=k.fx, intrinsics=k)

    @property
    def fb(self) -> float:
        return self.focal_px * self.baseline


@dataclass(frozen=True)
class MatcherConfig:
    block_radius: int = 3
    # Caps the search; nearer surfaces than focal_px * baseline / max_disp
    # are left to the monocular engine.
    max_disp: int = 24
    cost: str = "SAD"
    lr_threshold: float = 1.0
    uniqueness_ratio: float = 1.05
    d_min_valid: float = 0.25

    def __post_init__(self):
        if self.block_radius < 1 or self.max_disp < 1 or self.lr_threshold < 0:
            raise ValueError("invalid matcher configuration")
        if self.uniqueness_ratio < 1:
            raise ValueError("uniqueness_ratio must be >= 1")
        if self.cost not in ("SAD", "ZNCC"):
            raise ValueError(f"unknown cost {self.cost!r}")


@dataclass(frozen=True)
class CostVolume:
    costs: np.ndarray

    @property
    def max_disp(self) -> int:
        return self.costs.shape[0] - 1

    @property
    def height(self) -> int:
        return self.costs.shape[1]

    @property
    def width(self) -> int:
        return self.costs.shape[2]


def _box_sum(a: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Sum over (2r+1)^2 windows along the last two axes via an integral image.

    Returns (sums, inside) where inside marks centers whose window fits the frame.
    """
    k = 2 * r + 1
    *lead, h, w = a.shape
    ii = np.zeros((*lead, h + 1, w + 1), dtype=np.float64)
    np.cumsum(a, axis=-2, out=ii[..., 1:, 1:])
    np.cumsum(ii[..., 1:, 1:], axis=-1, out=ii[..., 1:, 1:])
    s = ii[..., k:, k:] - ii[..., :-k, k:] - ii[..., k:, :-k] + ii[..., :-k, :-k]
    out = np.zeros(a.shape, dtype=np.float64)
    out[..., r:h - r, r:w - r] = s
    inside = np.zeros((h, w), dtype=bool)
    inside[r:h - r, r:w - r] = True
    return out, inside


def _shifted(right: np.ndarray, max_disp: int, fill=0.0) -> np.ndarray:
    """Stack right(x - d) for d = 0..max_disp; out-of-frame entries take ``fill``."""
    h, w = right.shape
    out = np.full((max_disp + 1, h, w), fill, dtype=right.dtype)
    for d in range(max_disp + 1):
        out[d, :, d:] = right[:, :w - d]
    return out


@njit(cache=True)
def _window_any(bad, r):
    H, W = bad.shape
    ii = np.zeros((H + 1, W + 1))
    for y in range(H):
        run = 0.0
        for x in range(W):
            run += 1.0 if bad[y, x] else 0.0
            ii[y + 1, x + 1] = ii[y, x + 1] + run
    out = np.ones((H, W), dtype=np.bool_)
    for y in range(r, H - r):
        for x in range(r, W - r):
            n = ii[y + r + 1, x + r + 1] - ii[y - r, x + r + 1] - ii[y + r + 1, x - r] + ii[y - r, x - r]
            out[y, x] = n > 0.5
    return out


@njit(cache=True)
def _sad_volume(L, R, bad_l, bad_r, max_disp, r, large):
    H, W = L.shape
    D = max_disp + 1
    out = np.full((D, H, W), large)
    # a window is unusable when it touches the border or an invalid pixel
    wl = _window_any(bad_l, r)
    wr = _window_any(bad_r, r)
    hs = np.zeros((H, W))
    vs = np.zeros(W)
    row = np.zeros(W)
    for d in range(D):
        hs[:, :] = 0.0
        if d + 2 * r >= W:
            continue
        for y in range(H):
            for x in range(d, W):
                row[x] = abs(L[y, x] - R[y, x - d])
            acc = 0.0
            for x in range(d, d + 2 * r + 1):
                acc += row[x]
            hs[y, d + r] = acc
            for x in range(d + r + 1, W - r):
                acc += row[x + r] - row[x - r - 1]
                hs[y, x] = acc
        vs[:] = 0.0
        for y in range(2 * r + 1):
            for x in range(d + r, W - r):
                vs[x] += hs[y, x]
        for y in range(r, H - r):
            if y > r:
                for x in range(d + r, W - r):
                    vs[x] += hs[y + r, x] - hs[y - r - 1, x]
            for x in range(d + r, W - r):
                if not (wl[y, x] or wr[y, x - d]):
                    out[d, y, x] = vs[x]
    return out


def _zncc_volume(L, R, bad_l, bad_r, max_disp, r):
    Rs = _shifted(R, max_disp)
    bad = _shifted(bad_r, max_disp, fill=True) | bad_l[None]
    n = (2 * r + 1) ** 2
    sl, inside = _box_sum(L[None], r)
    sl2, _ = _box_sum((L * L)[None], r)
    sr, _ = _box_sum(Rs, r)
    sr2, _ = _box_sum(Rs * Rs, r)
    slr, _ = _box_sum(L[None] * Rs, r)
    cov = slr - sl * sr / n
    var = np.maximum(sl2 - sl * sl / n, 0) * np.maximum(sr2 - sr * sr / n, 0)
    ok = var > 1e-18
    costs = 1.0 - np.where(ok, cov / np.sqrt(np.where(ok, var, 1.0)), 0.0)
    nbad, _ = _box_sum(bad.astype(np.float64), r)
    return np.where((nbad > 0.5) | ~inside[None], LARGE, costs)


def compute_cost_volume(left: Image, right: Image, cfg: MatcherConfig) -> CostVolume:
    """SAD or 1 - ZNCC matching costs; windows touching the border or invalid pixels get LARGE."""
    if left.samples.shape[:2] != right.samples.shape[:2]:
        raise DimensionMismatch(f"{left.samples.shape} vs {right.samples.shape}")
    L = np.ascontiguousarray(left.gray())
    R = np.ascontiguousarray(right.gray())
    if cfg.cost == "SAD":
        costs = _sad_volume(L, R, ~left.valid, ~right.valid, cfg.max_disp, cfg.block_radius, LARGE)
    else:
        costs = _zncc_volume(L, R, ~left.valid, ~right.valid, cfg.max_disp, cfg.block_radius)
    return CostVolume(costs)


def right_view_volume(cv: CostVolume) -> CostVolume:
    """Re-index a left-reference volume to the right view: cost_R(x, d) = cost_L(x + d, d)."""
    D, h, w = cv.costs.shape
    out = np.full_like(cv.costs, LARGE)
    for d in range(D):
        out[d, :, :w - d] = cv.costs[d, :, d:]
    return CostVolume(out)


@njit(cache=True)
def _wta(c, right_view, uniqueness_ratio, large):
    D, H, W = c.shape
    disp = np.full((H, W), np.nan)
    conf = np.zeros((H, W))
    best = np.zeros(W, dtype=np.int64)
    c0 = np.empty(W)
    c2 = np.empty(W)
    for y in range(H):
        # row-wise passes keep memory access contiguous in x
        for x in range(W):
            best[x] = 0
            c0[x] = c[0, y, x]
            c2[x] = np.inf
        for d in range(1, D):
            for x in range(W):
                if right_view:
                    v = c[d, y, x + d] if x + d < W else large
                else:
                    v = c[d, y, x]
                if v < c0[x]:
                    c0[x] = v
                    best[x] = d
        for d in range(D):
            for x in range(W):
                if abs(d - best[x]) > 1:
                    if right_view:
                        v = c[d, y, x + d] if x + d < W else large
                    else:
                        v = c[d, y, x]
                    if v < c2[x]:
                        c2[x] = v
        for x in range(W):
            b = best[x]
            cb = c0[x]
            if cb >= large:
                continue
            cs = c2[x]
            has_second = cs < large
            if has_second:
                # an exact tie with the runner-up leaves the match undetermined
                if not cs > cb:
                    continue
                if cb > 0 and cs / cb < uniqueness_ratio:
                    continue
            off = 0.0
            if 0 < b < D - 1:
                if right_view:
                    cm = c[b - 1, y, x + b - 1]
                    cp = c[b + 1, y, x + b + 1] if x + b + 1 < W else large
                else:
                    cm = c[b - 1, y, x]
                    cp = c[b + 1, y, x]
                den = cm - 2.0 * cb + cp
                if cm < large and cp < large and den > 0:
                    off = (cm - cp) / (2.0 * den)
            disp[y, x] = b + off
            if has_second and cs > 0:
                conf[y, x] = min(max(1.0 - cb / cs, 0.0), 1.0)
            else:
                conf[y, x] = 1.0
    return disp, conf


def disparity_wta(cv: CostVolume, cfg: MatcherConfig, right_view: bool = False):
    """Winner-take-all disparity with parabola refinement.

    Ties go to the smallest disparity. Confidence is 1 - c(d*)/c(d2), d2 being
    the best disparity more than one step from d*. Returns (disparity,
    confidence); rejected pixels are NaN with confidence 0. ``right_view``
    reads a left-reference volume as cost_R(x, d) = cost_L(x + d, d).
    """
    return _wta(np.ascontiguousarray(cv.costs), right_view, float(cfg.uniqueness_ratio), LARGE)


def lr_consistency(dl: np.ndarray, dr: np.ndarray, threshold: float) -> np.ndarray:
    """Keep left disparities that agree with the right map at x - d (rounded)."""
    if dl.shape != dr.shape:
        raise DimensionMismatch(f"{dl.shape} vs {dr.shape}")
    h, w = dl.shape
    ok = np.isfinite(dl)
    xs = np.arange(w)[None, :] - np.where(ok, dl, 0.0)
    xi = np.rint(xs).astype(np.intp)
    inb = ok & (xi >= 0) & (xi < w)
    yy = np.broadcast_to(np.arange(h)[:, None], dl.shape)
    other = np.full(dl.shape, np.nan)
    other[inb] = dr[yy[inb], xi[inb]]
    keep = inb & np.isfinite(other) & (np.abs(dl - other) <= threshold)
    return np.where(keep, dl, np.nan)


def lr_consistency_right(dr: np.ndarray, dl: np.ndarray, threshold: float) -> np.ndarray:
    """Mirror of :func:`lr_consistency` for right-reference maps (lookup at x + d)."""
    return lr_consistency(dr[:, ::-1], dl[:, ::-1], threshold)[:, ::-1]


def disparity_to_depth(d: np.ndarray, rig: StereoRig, d_min_valid: float = 0.25) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    ok = np.isfinite(d) & (d > d_min_valid)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(ok, rig.fb / np.where(ok, d, 1.0), np.nan)


def depth_to_disparity(z: np.ndarray, rig: StereoRig) -> np.ndarray:
    from .defocus import NonPositiveDepth

    z = np.asarray(z, dtype=np.float64)
    ok = np.isfinite(z)
    if np.any(z[ok] <= 0):
        raise NonPositiveDepth("depths must be positive")
    return np.where(ok, rig.fb / np.where(ok, z, 1.0), np.nan)


def match_disparities(left: Image, right: Image, cfg: MatcherConfig, views=("left", "right")):
    """LR-checked disparities with confidences, keyed by reference view."""
    cv = compute_cost_volume(left, right, cfg)
    dl, confl = disparity_wta(cv, cfg)
    dr, confr = disparity_wta(cv, cfg, right_view=True)
    out = {}
    if "left" in views:
        d = lr_consistency(dl, dr, cfg.lr_threshold)
        out["left"] = (d, np.where(np.isfinite(d), confl, 0.0))
    if "right" in views:
        d = lr_consistency_right(dr, dl, cfg.lr_threshold)
        out["right"] = (d, np.where(np.isfinite(d), confr, 0.0))
    return out


def match_stereo(left: Image, right: Image, rig: StereoRig, cfg: MatcherConfig, reference: str = "left"):
    """Full stereo branch; returns (depth, confidence) in the reference view."""
    if reference not in ("left", "right"):
        raise ValueError(f"reference must be 'left' or 'right', got {reference!r}")
    d, c = match_disparities(left, right, cfg, views=(reference,))[reference]
    z = disparity_to_depth(d, rig, cfg.d_min_valid)
    return z, np.where(np.isfinite(z), c, 0.0)
