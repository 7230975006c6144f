"""Procedural piecewise-planar scenes and rectified stereo rendering."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import Homography, Image, warp_image
from .stereo import StereoRig


class InvalidSpec(ValueError):
    pass


@dataclass(frozen=True)
class TextureSpec:
    octaves: int = 5
    base_period: float = 48.0
    persistence: float = 0.6
    checker_period: int = 0
    contrast: float = 0.8
    # per-pixel grain keeps every matching window textured
    grain: float = 0.08
    min_window_var: float = 1e-4


@dataclass(frozen=True)
class SceneSpec:
    """Scene layout; an empty ``layout`` asks for a random desk-scale layout.

    Primitives are dicts with a ``kind`` key:
      plane   {depth}                          fronto-parallel background
      slanted {depth, gx, gy}                  inverse depth varies linearly (per px)
      rect    {x0, y0, x1, y1, depth}          fronto-parallel rectangle
      sphere  {cx, cy, radius_px, depth}       depth = nearest point of the sphere
    """

    width: int = 256
    height: int = 256
    layout: tuple = ()
    depth_range: tuple[float, float] = (0.35, 6.0)
    texture: TextureSpec = field(default_factory=TextureSpec)
    n_objects: int = 6
    rng_seed: int = 0

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise InvalidSpec("scene must be at least 8x8")
        lo, hi = self.depth_range
        if not 0 < lo < hi:
            raise InvalidSpec(f"bad depth range {self.depth_range}")
        if self.layout and self.layout[0].get("kind") not in ("plane", "slanted"):
            raise InvalidSpec("first primitive must be a full-frame background plane")


def random_layout(spec: SceneSpec, rng: np.random.Generator) -> list[dict]:
    lo, hi = spec.depth_range
    w, h = spec.width, spec.height
    # inverse-depth sampling spreads objects evenly in disparity
    def draw(a, b):
        return float(1.0 / rng.uniform(1.0 / b, 1.0 / a))

    far_lo = min(max(lo, 0.5 * hi), hi)
    zb = draw(far_lo, hi)
    layout = [{"kind": "slanted", "depth": zb,
               "gx": float(rng.uniform(-0.3, 0.3) / (zb * w)),
               "gy": float(rng.uniform(-0.3, 0.3) / (zb * h))}]
    for i in range(spec.n_objects):
        z = draw(lo, 0.9 * far_lo)
        if rng.uniform() < 0.7:
            bw = int(rng.integers(w // 8, w // 3))
            bh = int(rng.integers(h // 8, h // 3))
            x0 = int(rng.integers(0, w - bw))
            y0 = int(rng.integers(0, h - bh))
            layout.append({"kind": "rect", "x0": x0, "y0": y0, "x1": x0 + bw, "y1": y0 + bh, "depth": z})
        else:
            rad = float(rng.uniform(w / 16, w / 6))
            layout.append({"kind": "sphere", "cx": float(rng.uniform(0, w)), "cy": float(rng.uniform(0, h)),
                           "radius_px": rad, "depth": z})
    return layout


def _primitive_depth(p: dict, xs: np.ndarray, ys: np.ndarray, rig_f: float) -> np.ndarray:
    kind = p["kind"]
    z = float(p["depth"])
    if kind == "plane":
        return np.full(xs.shape, z)
    if kind == "slanted":
        w, h = xs.shape[1], xs.shape[0]
        inv = 1.0 / z + p.get("gx", 0.0) * (xs - (w - 1) / 2) + p.get("gy", 0.0) * (ys - (h - 1) / 2)
        return np.where(inv > 0, 1.0 / np.where(inv > 0, inv, 1.0), np.inf)
    if kind == "rect":
        inside = (xs >= p["x0"]) & (xs < p["x1"]) & (ys >= p["y0"]) & (ys < p["y1"])
        return np.where(inside, z, np.inf)
    if kind == "sphere":
        r2 = (xs - p["cx"]) ** 2 + (ys - p["cy"]) ** 2
        rad = float(p["radius_px"])
        inside = r2 < rad ** 2
        # metric radius implied by the projected radius at the sphere's depth
        R = rad * z / rig_f
        bulge = np.sqrt(np.clip(1.0 - r2 / rad ** 2, 0, 1)) * R
        return np.where(inside, z + R - bulge, np.inf)
    raise InvalidSpec(f"unknown primitive kind {kind!r}")


def value_noise(shape, tex: TextureSpec, rng: np.random.Generator) -> np.ndarray:
    """Multi-octave value noise in [0, 1]."""
    h, w = shape
    acc = np.zeros(shape)
    amp, period, total = 1.0, tex.base_period, 0.0
    for _ in range(tex.octaves):
        gh, gw = int(np.ceil(h / period)) + 2, int(np.ceil(w / period)) + 2
        grid = rng.uniform(-1, 1, size=(gh, gw))
        ys = np.arange(h) / period
        xs = np.arange(w) / period
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        acc += amp * ndimage.map_coordinates(grid, [yy, xx], order=3, mode="nearest")
        total += amp
        amp *= tex.persistence
        period = max(period / 2.0, 2.0)
    acc /= total
    lo, hi = acc.min(), acc.max()
    return (acc - lo) / (hi - lo) if hi > lo else np.full(shape, 0.5)


def generate_scene(spec: SceneSpec, focal_px: float | None = None):
    """Return (gt_depth, texture) for the left view; deterministic in ``spec.rng_seed``."""
    rng = np.random.default_rng(spec.rng_seed)
    layout = list(spec.layout) or random_layout(spec, rng)
    f = focal_px if focal_px is not None else float(max(spec.width, spec.height))
    ys, xs = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
    lo, hi = spec.depth_range
    depth = np.full(xs.shape, np.inf)
    label = np.zeros(xs.shape, dtype=np.int64)
    for i, p in enumerate(layout):
        zp = _primitive_depth(p, xs, ys, f)
        fin = zp[np.isfinite(zp)]
        if fin.size and (fin.min() < lo - 1e-9 or fin.max() > hi + 1e-9):
            if p["kind"] == "slanted":
                zp = np.where(np.isfinite(zp), np.clip(zp, lo, hi), zp)
            else:
                raise InvalidSpec(f"primitive {i} leaves depth range {spec.depth_range}")
        closer = zp < depth
        depth = np.where(closer, zp, depth)
        label = np.where(closer, i, label)
    if not np.all(np.isfinite(depth)):
        raise InvalidSpec("primitives do not cover the frame")

    tex = spec.texture
    shade = np.zeros(xs.shape)
    for i in range(len(layout)):
        field_i = value_noise(xs.shape, tex, rng)
        shade = np.where(label == i, field_i, shade)
    if tex.checker_period > 0:
        chk = ((xs // tex.checker_period + ys // tex.checker_period) % 2) * 2 - 1
        shade = 0.75 * shade + 0.25 * (chk + 1) / 2
    u = rng.uniform(size=xs.shape)
    g = tex.grain
    while True:
        texture = np.clip(0.5 + tex.contrast * ((1 - g) * shade + g * u - 0.5), 0.0, 1.0)
        if tex.min_window_var <= 0 or g >= 1 or min_window_variance(texture) >= tex.min_window_var:
            break
        g = min(1.0, max(2 * g, 0.02))
    return depth, Image(texture)


def min_window_variance(img: np.ndarray, size: int = 9) -> float:
    if min(img.shape[:2]) < size:
        return float(np.var(img))
    m = ndimage.uniform_filter(img, size, mode="nearest")
    m2 = ndimage.uniform_filter(img * img, size, mode="nearest")
    h = size // 2
    return float((m2 - m * m)[h:-h, h:-h].min())


def _forward_map(values: np.ndarray, disp: np.ndarray, width: int):
    """Splat rows of ``values`` to x - disp with linear interpolation along surfaces.

    Neighbouring left pixels form a segment when their disparities differ by
    less than one pixel; each right-image integer location inside a segment
    takes the interpolated value. The nearest surface (largest disparity) wins.
    Returns (values_right, disparity_right); uncovered pixels are NaN.
    """
    h, w = disp.shape
    xl = np.arange(w, dtype=np.float64)[None, :]
    xr = xl - disp
    a, b = xr[:, :-1], xr[:, 1:]
    da, db = disp[:, :-1], disp[:, 1:]
    same = np.abs(da - db) < 1.0
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)
    zbuf = np.full((h, w), -np.inf)
    out_v = np.full((h, w) + values.shape[2:], np.nan)
    rows = np.broadcast_to(np.arange(h)[:, None], a.shape)
    cands = []
    span = int(np.ceil(np.nanmax(hi - lo))) + 1 if np.any(same) else 1
    base = np.ceil(lo - 1e-9)
    for k in range(span + 1):
        x = base + k
        ok = same & (x <= hi + 1e-9) & (x >= 0) & (x <= width - 1)
        t = np.where(hi > lo, (x - a) / np.where(hi > lo, b - a, 1.0), 0.0)
        t = np.clip(t, 0.0, 1.0)
        cands.append((ok, x, t))
    for ok, x, t in cands:
        r, c = rows[ok], x[ok].astype(np.intp)
        d = (da + t * (db - da))[ok]
        np.maximum.at(zbuf, (r, c), d)
    for ok, x, t in cands:
        r, c = rows[ok], x[ok].astype(np.intp)
        tt = t[ok]
        d = (da + t * (db - da))[ok]
        win = d >= zbuf[r, c]
        va = values[:, :-1][ok]
        vb = values[:, 1:][ok]
        if values.ndim == 3:
            tt = tt[:, None]
        v = va + tt * (vb - va)
        out_v[r[win], c[win]] = v[win]
    disp_r = np.where(np.isfinite(zbuf), zbuf, np.nan)
    return out_v, disp_r


def render_stereo_pair(texture: Image, gt_depth: np.ndarray, rig: StereoRig):
    """Left image is the texture; the right image is forward-warped by d = fB/z."""
    if not np.all(np.isfinite(gt_depth)) or np.any(gt_depth <= 0):
        raise ValueError("ground-truth depth must be valid and positive everywhere")
    disp = rig.fb / gt_depth
    vals, disp_r = _forward_map(texture.samples, disp, texture.width)
    valid = np.isfinite(disp_r)
    if vals.ndim == 3:
        vals = np.where(valid[..., None], vals, 0.0)
    else:
        vals = np.where(valid, vals, 0.0)
    return texture, Image(vals, valid)


def right_view_depth(gt_depth: np.ndarray, rig: StereoRig) -> np.ndarray:
    """Ground-truth depth seen from the right camera; disocclusions are NaN."""
    _, disp_r = _forward_map(gt_depth, rig.fb / gt_depth, gt_depth.shape[1])
    return rig.fb / disp_r


def decalibrate(img: Image, h: Homography) -> Image:
    return warp_image(img, h)


def add_sensor_noise(img: Image, sigma: float, rng: np.random.Generator) -> Image:
    if sigma <= 0:
        return img
    noisy = np.clip(img.samples + rng.normal(0, sigma, img.samples.shape), 0, 1)
    return Image(noisy, img.valid)
