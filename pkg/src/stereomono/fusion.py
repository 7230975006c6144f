"""Per-pixel mono/stereo fusion by binary source selection, and depth metrics."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .defocus import DefocusModel, PsiRange, valid_depth_range
from .stereo import DimensionMismatch

STEREO, MONO, INVALID = 0, 1, 2
MODES = ("confidence", "range_gated", "hybrid")


def default_mono_range() -> tuple[float, float]:
    return valid_depth_range(DefocusModel.from_coefficient(z_n=0.7), PsiRange())


@dataclass(frozen=True)
class FusionPolicy:
    mode: str = "range_gated"
    mono_range: tuple[float, float] = field(default_factory=default_mono_range)
    confidence_margin: float = 0.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.confidence_margin < 0:
            raise ValueError("confidence_margin must be >= 0")
        if not self.mono_range[0] < self.mono_range[1]:
            raise ValueError("mono_range must satisfy z_near < z_far")


@dataclass
class FusionResult:
    depth: np.ndarray
    source_mask: np.ndarray  # STEREO / MONO / INVALID per pixel


def fuse(stereo, mono, policy: FusionPolicy = FusionPolicy()) -> FusionResult:
    """Pick one source per pixel.

    ``stereo`` and ``mono`` are (depth, confidence) pairs with NaN for invalid
    depth. A pixel valid in only one source always takes that source.
    """
    zs, cs = (np.asarray(a, dtype=np.float64) for a in stereo)
    zm, cm = (np.asarray(a, dtype=np.float64) for a in mono)
    if not (zs.shape == cs.shape == zm.shape == cm.shape):
        raise DimensionMismatch("all maps must share dimensions")
    vs, vm = np.isfinite(zs), np.isfinite(zm)
    by_conf = cm > cs + policy.confidence_margin
    z_near, z_far = policy.mono_range
    in_gate = vm & (zm >= z_near) & (zm <= z_far)
    if policy.mode == "confidence":
        pick_mono = by_conf
    elif policy.mode == "range_gated":
        pick_mono = in_gate
    else:
        pick_mono = in_gate & by_conf
    pick_mono = (vm & ~vs) | (vm & vs & pick_mono)
    mask = np.full(zs.shape, INVALID, dtype=np.uint8)
    mask[vs] = STEREO
    mask[pick_mono] = MONO
    depth = np.where(pick_mono, zm, np.where(vs, zs, np.nan))
    return FusionResult(depth, mask)


@dataclass
class EvalReport:
    l1: float
    rel_l1: float
    mape_bins: list  # (lo, hi, mape_percent, count)
    n_valid: int
    label: str = ""

    def rows(self):
        for lo, hi, mape, n in self.mape_bins:
            yield {"label": self.label, "bin_lo": lo, "bin_hi": hi, "mape_percent": mape, "count": n,
                   "l1": "", "rel_l1": ""}
        yield {"label": self.label, "bin_lo": "all", "bin_hi": "all", "mape_percent": 100 * self.rel_l1,
               "count": self.n_valid, "l1": self.l1, "rel_l1": self.rel_l1}

    def to_text(self) -> str:
        lines = [f"{self.label or 'prediction'}: L1 {self.l1:.4f} m, rel-L1 {self.rel_l1:.4f} over {self.n_valid} px"]
        for lo, hi, mape, n in self.mape_bins:
            shown = "   n/a" if n == 0 else f"{mape:6.2f}%"
            lines.append(f"  [{lo:.3f}, {hi:.3f}) m  MAPE {shown}  ({n} px)")
        return "\n".join(lines)


CSV_FIELDS = ["label", "bin_lo", "bin_hi", "mape_percent", "count", "l1", "rel_l1"]


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for rep in reports:
        for row in rep.rows():
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def evaluate(pred: np.ndarray, gt: np.ndarray, bins=(), label: str = "") -> EvalReport:
    """L1, relative L1 (divided by gt) and per-bin MAPE over jointly valid pixels.

    Bins are half-open [lo, hi) depth ranges in meters. Empty intersections are
    reported with n_valid = 0 and NaN metrics.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionMismatch(f"{pred.shape} vs {gt.shape}")
    bins = [tuple(map(float, b)) for b in bins]
    ordered = sorted(bins)
    for (a0, a1), (b0, _) in zip(ordered, ordered[1:]):
        if b0 < a1:
            raise ValueError("bins must be disjoint")
    both = np.isfinite(pred) & np.isfinite(gt)
    err = np.abs(pred[both] - gt[both])
    g = gt[both]
    rel = err / g
    n = int(both.sum())
    l1 = float(err.mean()) if n else float("nan")
    rl1 = float(rel.mean()) if n else float("nan")
    out = []
    for lo, hi in bins:
        sel = (g >= lo) & (g < hi)
        k = int(sel.sum())
        out.append((lo, hi, float(100 * rel[sel].mean()) if k else float("nan"), k))
    return EvalReport(l1, rl1, out, n, label)


def masked_rel_l1(pred: np.ndarray, gt: np.ndarray, z_range: tuple[float, float]) -> tuple[float, int]:
    """Relative L1 restricted to gt inside [z_near, z_far] (both bounds applied)."""
    rep = evaluate(pred, gt, [(z_range[0], np.nextafter(z_range[1], np.inf))])
    lo, hi, mape, n = rep.mape_bins[0]
    return (mape / 100.0 if n else float("nan")), n


def inverse_depth_bins(n_bins: int, z_range: tuple[float, float]) -> list[tuple[float, float]]:
    """Bins uniform in 1/z over the range, nearest first."""
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    z0, z1 = z_range
    inv = np.linspace(1.0 / z0, 1.0 / z1, n_bins + 1)
    edges = 1.0 / inv
    edges[0], edges[-1] = z0, z1
    return [(float(edges[i]), float(edges[i + 1])) for i in range(n_bins)]


def mape_by_depth(pred: np.ndarray, gt: np.ndarray, n_bins: int, z_range: tuple[float, float]):
    """(bin center, MAPE %, count) per inverse-depth bin; empty bins have count 0."""
    bins = inverse_depth_bins(n_bins, z_range)
    # the last bin is closed so depths equal to the far end are counted
    bins[-1] = (bins[-1][0], float(np.nextafter(bins[-1][1], np.inf)))
    rep = evaluate(pred, gt, bins)
    curve = []
    for lo, hi, mape, n in rep.mape_bins:
        center = 2.0 / (1.0 / lo + 1.0 / hi)
        curve.append((center, mape if n else float("nan"), n))
    return curve


def pooled_mape_by_depth(pairs, n_bins: int, z_range: tuple[float, float]):
    """Like :func:`mape_by_depth` but pooled over many (pred, gt) frames."""
    preds = np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p, _ in pairs])
    gts = np.concatenate([np.asarray(g, dtype=np.float64).ravel() for _, g in pairs])
    return mape_by_depth(preds, gts, n_bins, z_range)
