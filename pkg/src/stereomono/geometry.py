"""Projective transforms, bilinear inverse warping and rotation homographies."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit


class DegeneratePoint(ValueError):
    pass


class SingularHomography(ValueError):
    pass


IDENTITY_PARAMS = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class Homography:
    """3x3 projective transform with m[2, 2] fixed to 1."""

    m: np.ndarray

    def __post_init__(self):
        m = np.array(self.m, dtype=np.float64).reshape(3, 3)
        if m[2, 2] != 1.0:
            if abs(m[2, 2]) < 1e-15:
                raise SingularHomography("m[2,2] is zero, cannot renormalize")
            m = m / m[2, 2]
            m[2, 2] = 1.0
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @property
    def params(self) -> np.ndarray:
        return params_of(self)

    def is_invertible(self) -> bool:
        return abs(np.linalg.det(self.m)) > 1e-12

    def __matmul__(self, other: "Homography") -> "Homography":
        return compose(self, other)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @classmethod
    def default_for(cls, width: int, height: int) -> "Intrinsics":
        # f = max(w, h), principal point at the image center
        f = float(max(width, height))
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Image:
    """Grayscale (H, W) or RGB (H, W, 3) samples in [0, 1] with a validity mask."""

    samples: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim not in (2, 3) or (s.ndim == 3 and s.shape[2] not in (1, 3)):
            raise ValueError(f"unsupported image shape {s.shape}")
        if s.ndim == 3 and s.shape[2] == 1:
            s = s[:, :, 0]
        if not np.all(np.isfinite(s)):
            raise ValueError("image samples must be finite")
        v = np.ones(s.shape[:2], dtype=bool) if self.valid is None else np.asarray(self.valid, dtype=bool)
        if v.shape != s.shape[:2]:
            raise ValueError("validity mask shape does not match image")
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "valid", v)

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.samples.ndim == 2 else 3

    def gray(self) -> np.ndarray:
        if self.samples.ndim == 2:
            return self.samples
        return self.samples @ np.array([0.299, 0.587, 0.114])


def homography_from_params(p) -> Homography:
    p = np.asarray(p, dtype=np.float64).ravel()
    if p.size != 8:
        raise ValueError("expected 8 parameters")
    return Homography(np.append(p, 1.0).reshape(3, 3))


def params_of(h: Homography) -> np.ndarray:
    return h.m.ravel()[:8].copy()


def compose(a: Homography, b: Homography) -> Homography:
    """Return the transform applying ``b`` first, then ``a``."""
    return Homography(a.m @ b.m)


def invert(h: Homography) -> Homography:
    if not h.is_invertible():
        raise SingularHomography(f"|det| = {abs(np.linalg.det(h.m)):.3g}")
    return Homography(np.linalg.inv(h.m))


def apply_homography(h: Homography, pt) -> np.ndarray:
    x, y = float(pt[0]), float(pt[1])
    u, v, w = h.m @ np.array([x, y, 1.0])
    if abs(w) <= 1e-12:
        raise DegeneratePoint(f"homogeneous w = {w:.3g} at ({x}, {y})")
    return np.array([u / w, v / w])


def apply_homography_grid(h: Homography, xs: np.ndarray, ys: np.ndarray):
    """Vectorized mapping; points with |w| <= 1e-12 come back as NaN."""
    m = h.m
    u = m[0, 0] * xs + m[0, 1] * ys + m[0, 2]
    v = m[1, 0] * xs + m[1, 1] * ys + m[1, 2]
    w = m[2, 0] * xs + m[2, 1] * ys + m[2, 2]
    bad = np.abs(w) <= 1e-12
    w = np.where(bad, np.nan, w)
    return u / w, v / w


@njit(cache=True)
def _bilinear(samples, valid, sx, sy):
    h, w = valid.shape
    oh, ow = sx.shape
    out = np.zeros((oh, ow, samples.shape[2]))
    ok = np.zeros((oh, ow), dtype=np.bool_)
    for i in range(oh):
        for j in range(ow):
            x = sx[i, j]
            y = sy[i, j]
            if not (x >= 0.0 and y >= 0.0 and x <= w - 1 and y <= h - 1):
                continue
            x0 = min(int(np.floor(x)), w - 1)
            y0 = min(int(np.floor(y)), h - 1)
            fx = x - x0
            fy = y - y0
            x1 = min(x0 + 1, w - 1)
            y1 = min(y0 + 1, h - 1)
            if not valid[y0, x0]:
                continue
            if fx != 0.0 and not valid[y0, x1]:
                continue
            if fy != 0.0 and not valid[y1, x0]:
                continue
            if fx != 0.0 and fy != 0.0 and not valid[y1, x1]:
                continue
            for ch in range(samples.shape[2]):
                top = samples[y0, x0, ch] * (1 - fx) + samples[y0, x1, ch] * fx
                bot = samples[y1, x0, ch] * (1 - fx) + samples[y1, x1, ch] * fx
                out[i, j, ch] = top * (1 - fy) + bot * fy
            ok[i, j] = True
    return out, ok


def sample_bilinear(samples: np.ndarray, valid: np.ndarray, sx: np.ndarray, sy: np.ndarray,
                    nearest: bool = False):
    """Sample ``samples`` at float coordinates.

    A location is invalid when it lies outside the pixel grid or when any
    neighbour carrying non-zero weight is invalid. Never clamps.
    """
    h, w = valid.shape
    if nearest:
        finite = np.isfinite(sx) & np.isfinite(sy)
        sx = np.where(finite, sx, -1.0)
        sy = np.where(finite, sy, -1.0)
        inside = finite & (sx >= 0) & (sy >= 0) & (sx <= w - 1) & (sy <= h - 1)
        xi = np.clip(np.rint(sx).astype(np.intp), 0, w - 1)
        yi = np.clip(np.rint(sy).astype(np.intp), 0, h - 1)
        ok = inside & valid[yi, xi]
        out = samples[yi, xi]
        mask = ok[..., None] if out.ndim == 3 else ok
        return np.where(mask, out, 0.0), ok
    s3 = samples if samples.ndim == 3 else samples[:, :, None]
    out, ok = _bilinear(np.ascontiguousarray(s3, dtype=np.float64), np.ascontiguousarray(valid),
                        np.ascontiguousarray(sx, dtype=np.float64), np.ascontiguousarray(sy, dtype=np.float64))
    return (out if samples.ndim == 3 else out[:, :, 0]), ok


def warp_image(src: Image, h: Homography, nearest: bool = False) -> Image:
    """Inverse warp: output pixel p takes ``src`` at h^-1 p."""
    hinv = invert(h)
    ys, xs = np.mgrid[0:src.height, 0:src.width].astype(np.float64)
    sx, sy = apply_homography_grid(hinv, xs, ys)
    out, ok = sample_bilinear(src.samples, src.valid, sx, sy, nearest=nearest)
    return Image(out, ok)


def warp_map(values: np.ndarray, h: Homography, nearest: bool = False) -> np.ndarray:
    """Warp a NaN-masked scalar map (depth, disparity) the same way as an image."""
    valid = np.isfinite(values)
    filled = np.where(valid, values, 0.0)
    ys, xs = np.mgrid[0:values.shape[0], 0:values.shape[1]].astype(np.float64)
    sx, sy = apply_homography_grid(invert(h), xs, ys)
    out, ok = sample_bilinear(filled, valid, sx, sy, nearest=nearest)
    return np.where(ok, out, np.nan)


AXES = ("inplane", "pitch", "yaw")


def rotation_matrix(axis: str, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    if axis == "inplane":
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    if axis == "pitch":
        return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    if axis == "yaw":
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    raise ValueError(f"unknown rotation axis {axis!r}; expected one of {AXES}")


def rotation_homography(axis: str, angle: float, k: Intrinsics) -> Homography:
    """Homography K R K^-1 induced by rotating the camera about one axis."""
    if abs(angle) >= np.pi / 2:
        raise ValueError("rotation angle must be below 90 degrees")
    K = k.K
    return Homography(K @ rotation_matrix(axis, angle) @ np.linalg.inv(K))


def corner_error(a: Homography, b: Homography, width: int, height: int) -> float:
    """Mean distance between the images of the four frame corners under a and b."""
    corners = [(0, 0), (width - 1, 0), (0, height - 1), (width - 1, height - 1)]
    d = [np.linalg.norm(apply_homography(a, c) - apply_homography(b, c)) for c in corners]
    return float(np.mean(d))
