"""Phase-coded defocus model and simulated monocular depth engines.

The defocus parameter is psi = C * (1/z_o - 1/z_n) with C = pi R^2 / lambda.
Positive psi means the object is nearer than the focus distance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


class NonPositiveDepth(ValueError):
    pass


class PsiOutOfPhysicalRange(ValueError):
    pass


class InvalidRange(ValueError):
    pass


class ObjectInsideFocalLength(ValueError):
    pass


DEFAULT_C = 9.0
DEFAULT_APERTURE_RADIUS = 1.14e-3


@dataclass(frozen=True)
class DefocusModel:
    R: float = DEFAULT_APERTURE_RADIUS
    lam: float = math.pi * DEFAULT_APERTURE_RADIUS ** 2 / DEFAULT_C
    f: float = 0.016
    z_n: float = 1.5

    def __post_init__(self):
        if self.R <= 0 or self.lam <= 0:
            raise ValueError("aperture radius and wavelength must be positive")
        if self.z_n <= self.f:
            raise ValueError("focus distance must exceed the focal length")

    @property
    def C(self) -> float:
        return math.pi * self.R ** 2 / self.lam

    @classmethod
    def from_coefficient(cls, C: float = DEFAULT_C, z_n: float = 1.5, f: float = 0.016,
                         R: float = DEFAULT_APERTURE_RADIUS) -> "DefocusModel":
        return cls(R=R, lam=math.pi * R ** 2 / C, f=f, z_n=z_n)


@dataclass(frozen=True)
class PsiRange:
    psi_min: float = -4.0
    psi_max: float = 10.0

    def __post_init__(self):
        if not self.psi_min < self.psi_max:
            raise InvalidRange(f"psi_min ({self.psi_min}) must be below psi_max ({self.psi_max})")

    @property
    def mid(self) -> float:
        return 0.5 * (self.psi_min + self.psi_max)

    @property
    def half_span(self) -> float:
        return 0.5 * (self.psi_max - self.psi_min)


@dataclass(frozen=True)
class MonoSimSpec:
    mode: str = "phase_coded"
    noise_sigma_psi: float = 0.0
    relative_scale: float = 1.0
    relative_shift: float = 0.0
    # image_based only: amplitude and correlation length (px) of the multiplicative noise
    relative_noise: float = 0.05
    relative_noise_scale: float = 24.0
    # phase_coded only: "invalid" drops out-of-range pixels, "saturate" reports
    # the depth at the nearest range end with zero confidence
    out_of_range: str = "invalid"
    rng_seed: int = 0

    def __post_init__(self):
        if self.mode not in ("phase_coded", "image_based"):
            raise ValueError(f"unknown mono mode {self.mode!r}")
        if self.noise_sigma_psi < 0:
            raise ValueError("noise_sigma_psi must be >= 0")
        if self.relative_scale <= 0:
            raise ValueError("relative_scale must be > 0")
        if self.out_of_range not in ("invalid", "saturate"):
            raise ValueError(f"unknown out_of_range policy {self.out_of_range!r}")


def psi_from_depth(m: DefocusModel, z_o):
    z = np.asarray(z_o, dtype=np.float64)
    if np.any(z <= 0):
        raise NonPositiveDepth("depth must be positive")
    psi = m.C * (1.0 / z - 1.0 / m.z_n)
    return float(psi) if psi.ndim == 0 else psi


def depth_from_psi(m: DefocusModel, psi):
    p = np.asarray(psi, dtype=np.float64)
    inv = p / m.C + 1.0 / m.z_n
    if np.any(inv <= 0):
        raise PsiOutOfPhysicalRange(f"psi must exceed {-m.C / m.z_n:.4g}")
    z = 1.0 / inv
    return float(z) if z.ndim == 0 else z


def valid_depth_range(m: DefocusModel, r: PsiRange = PsiRange()) -> tuple[float, float]:
    """(z_near, z_far) covered by the psi range for this focus setting."""
    if not r.psi_min < r.psi_max:
        raise InvalidRange("degenerate psi range")
    return depth_from_psi(m, r.psi_max), depth_from_psi(m, r.psi_min)


def thin_lens_image_distance(m: DefocusModel, z: float) -> float:
    if z <= m.f:
        raise ObjectInsideFocalLength(f"object at {z} m is inside the focal length {m.f} m")
    return 1.0 / (1.0 / m.f - 1.0 / z)


def psi_quantize(psi, levels: int = 15, r: PsiRange = PsiRange()):
    """Snap psi to ``levels`` uniform values over the range; ties go to the lower level."""
    if levels < 2:
        raise ValueError("levels must be >= 2")
    p = np.asarray(psi, dtype=np.float64)
    step = (r.psi_max - r.psi_min) / (levels - 1)
    t = (p - r.psi_min) / step
    idx = np.ceil(t - 0.5)
    idx = np.clip(idx, 0, levels - 1)
    q = r.psi_min + idx * step
    return float(q) if q.ndim == 0 else q


def phase_coded_confidence(psi: np.ndarray, r: PsiRange) -> np.ndarray:
    """Triangular confidence in psi, peaking at the range midpoint, floored at 0.05."""
    return np.maximum(1.0 - np.abs(psi - r.mid) / r.half_span, 0.05)


def _lowfreq_field(shape, scale: float, rng: np.random.Generator) -> np.ndarray:
    noise = rng.standard_normal(shape)
    smooth = ndimage.gaussian_filter(noise, sigma=scale, mode="reflect")
    std = smooth.std()
    return smooth / std if std > 0 else smooth


def simulate_mono_depth(gt: np.ndarray, m: DefocusModel, r: PsiRange, spec: MonoSimSpec):
    """Emulate a monocular depth engine on a ground-truth depth map.

    Returns (depth, confidence); invalid pixels are NaN with confidence 0.
    image_based output is only meaningful up to an unknown scale and shift.
    """
    gt = np.asarray(gt, dtype=np.float64)
    valid = np.isfinite(gt)
    if np.any(gt[valid] <= 0):
        raise NonPositiveDepth("ground-truth depths must be positive")
    rng = np.random.default_rng(spec.rng_seed)
    depth = np.full(gt.shape, np.nan)
    conf = np.zeros(gt.shape)

    if spec.mode == "phase_coded":
        psi = np.full(gt.shape, np.nan)
        psi[valid] = psi_from_depth(m, gt[valid])
        noise = rng.standard_normal(gt.shape) * spec.noise_sigma_psi
        inside = valid & (psi >= r.psi_min) & (psi <= r.psi_max)
        if spec.noise_sigma_psi > 0:
            est = np.clip(psi + noise, r.psi_min, r.psi_max)
            depth[inside] = depth_from_psi(m, est[inside])
        else:
            depth[inside] = gt[inside]
        conf[inside] = phase_coded_confidence(psi[inside], r)
        if spec.out_of_range == "saturate":
            outside = valid & ~inside
            depth[outside] = depth_from_psi(m, np.clip(psi[outside], r.psi_min, r.psi_max))
        return depth, conf

    field = _lowfreq_field(gt.shape, spec.relative_noise_scale, rng)
    rel = spec.relative_scale * gt + spec.relative_shift
    depth[valid] = (rel * (1.0 + spec.relative_noise * field))[valid]
    conf[valid] = 0.5
    return depth, conf
