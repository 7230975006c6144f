"""On-disk synthetic datasets: PNG images, PFM depths and a versioned manifest."""
from __future__ import annotations

import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .defocus import DefocusModel
from .geometry import AXES, Homography, Intrinsics, homography_from_params, rotation_homography
from .io import read_pfm, read_png, write_mask, write_pfm, write_png
from .simulator import SceneSpec, add_sensor_noise, decalibrate, generate_scene, render_stereo_pair, right_view_depth
from .stereo import StereoRig

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.yaml"


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class DecalSpec:
    """Decalibration recipe: a fixed rotation, a random rotation range, or raw parameters."""

    axis: str | None = None
    angle_deg: float = 0.0
    # random draws use angle_deg as the lower and angle_hi_deg as the upper end
    angle_hi_deg: float | None = None
    params: tuple | None = None

    def homography(self, k: Intrinsics, rng: np.random.Generator) -> Homography:
        if self.params is not None:
            return homography_from_params(self.params)
        a = self.angle_deg
        if self.angle_hi_deg is not None:
            a = float(rng.uniform(self.angle_deg, self.angle_hi_deg))
        return rotation_homography(self.axis, np.deg2rad(a), k)


_ANGLE = r"([-+]?\d*\.?\d+(?:[eE][-+]?\d+)?)"


def parse_decal(text: str) -> DecalSpec:
    """``inplane:7deg``, ``pitch:-2deg``, ``inplane:-7..7deg`` (uniform) or ``params:a,b,c,d,e,f,g,h``."""
    text = text.strip()
    if text.startswith("params:"):
        try:
            p = tuple(float(v) for v in text[7:].split(","))
        except ValueError as e:
            raise ValueError(f"bad parameter list in {text!r}") from e
        if len(p) != 8:
            raise ValueError("params: needs exactly 8 comma-separated values")
        return DecalSpec(params=p)
    m = re.fullmatch(r"(\w+):" + _ANGLE + r"(?:\.\." + _ANGLE + r")?(deg|rad)?", text)
    if not m or m.group(1) not in AXES:
        raise ValueError(f"cannot parse decalibration {text!r}; try inplane:7deg")
    axis, lo, hi, unit = m.groups()
    conv = (lambda v: float(np.rad2deg(float(v)))) if unit == "rad" else float
    return DecalSpec(axis=axis, angle_deg=conv(lo), angle_hi_deg=conv(hi) if hi else None)


@dataclass
class Record:
    index: int
    seed: int
    left_path: str
    right_path: str
    right_mask_path: str
    gt_depth_path: str
    gt_depth_right_path: str
    decalibration_params: list | None = None
    decalibrated_path: str | None = None
    decalibrated_mask_path: str | None = None
    decalibrated_view: str | None = None


@dataclass
class DatasetManifest:
    root: Path
    rig: StereoRig
    defocus_left: DefocusModel
    defocus_right: DefocusModel
    records: list = field(default_factory=list)

    def path(self, rel: str) -> Path:
        return self.root / rel

    def load(self, rec: Record, decalibrated: bool = True):
        """(left, right, gt_left, gt_right); the decalibrated view replaces its clean one."""
        left = read_png(self.path(rec.left_path))
        right = read_png(self.path(rec.right_path), self.path(rec.right_mask_path))
        if decalibrated and rec.decalibrated_path:
            img = read_png(self.path(rec.decalibrated_path), self.path(rec.decalibrated_mask_path))
            if rec.decalibrated_view == "left":
                left = img
            else:
                right = img
        return left, right, read_pfm(self.path(rec.gt_depth_path)), read_pfm(self.path(rec.gt_depth_right_path))

    def decalibration(self, rec: Record) -> Homography | None:
        return None if rec.decalibration_params is None else homography_from_params(rec.decalibration_params)


def _defocus_dict(m: DefocusModel) -> dict:
    return {"C": float(m.C), "z_n": float(m.z_n), "f": float(m.f), "R": float(m.R)}


def write_manifest(man: DatasetManifest) -> Path:
    k = man.rig.intrinsics
    doc = {
        "manifest_version": MANIFEST_VERSION,
        "rig": {"baseline": float(man.rig.baseline), "focal_px": float(man.rig.focal_px),
                "cx": float(k.cx), "cy": float(k.cy)},
        "defocus_left": _defocus_dict(man.defocus_left),
        "defocus_right": _defocus_dict(man.defocus_right),
        "records": [{k2: v for k2, v in vars(r).items() if v is not None} for r in man.records],
    }
    out = man.root / MANIFEST_NAME
    out.write_text(yaml.safe_dump(doc, sort_keys=False, default_flow_style=None))
    return out


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    doc = yaml.safe_load(path.read_text())  # OSError propagates as an I/O failure
    if not isinstance(doc, dict) or doc.get("manifest_version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}: missing or unsupported manifest_version")
    try:
        r = doc["rig"]
        k = Intrinsics(r["focal_px"], r["focal_px"], r["cx"], r["cy"])
        rig = StereoRig(baseline=r["baseline"], focal_px=r["focal_px"], intrinsics=k)
        dl = DefocusModel.from_coefficient(**doc["defocus_left"])
        dr = DefocusModel.from_coefficient(**doc["defocus_right"])
        records = [Record(**rec) for rec in doc.get("records") or []]
    except (KeyError, TypeError) as e:
        raise ManifestError(f"{path}: malformed manifest ({e})") from e
    man = DatasetManifest(path.parent, rig, dl, dr, records)
    for rec in records:
        for rel in (rec.left_path, rec.right_path, rec.gt_depth_path, rec.gt_depth_right_path):
            if not man.path(rel).exists():
                raise FileNotFoundError(f"{man.path(rel)} referenced by the manifest does not exist")
    return man


def _build_one(args):
    i, seed, root, spec, rig, decal, view, noise = args
    d = f"scene_{i:04d}"
    (root / d).mkdir(parents=True, exist_ok=True)
    gt, tex = generate_scene(replace(spec, rng_seed=seed), focal_px=rig.focal_px)
    left, right = render_stereo_pair(tex, gt, rig)
    rng = np.random.default_rng(seed + 1)
    left = add_sensor_noise(left, noise, rng)
    right = add_sensor_noise(right, noise, rng)
    rec = Record(i, seed, f"{d}/left.png", f"{d}/right.png", f"{d}/right_mask.png",
                 f"{d}/gt_depth.pfm", f"{d}/gt_depth_right.pfm")
    write_png(root / rec.left_path, left)
    write_png(root / rec.right_path, right)
    write_mask(root / rec.right_mask_path, right.valid)
    write_pfm(root / rec.gt_depth_path, gt)
    write_pfm(root / rec.gt_depth_right_path, right_view_depth(gt, rig))
    if decal is not None:
        h = decal.homography(rig.intrinsics, rng)
        src = left if view == "left" else right
        img = decalibrate(src, h)
        rec.decalibration_params = [float(v) for v in h.params]
        rec.decalibrated_view = view
        rec.decalibrated_path = f"{d}/{view}_decal.png"
        rec.decalibrated_mask_path = f"{d}/{view}_decal_mask.png"
        write_png(root / rec.decalibrated_path, img)
        write_mask(root / rec.decalibrated_mask_path, img.valid)
    return rec


def build_dataset(n: int, spec: SceneSpec, rig: StereoRig, defocus: tuple, root, decal: DecalSpec | None = None,
                  seed: int = 0, view: str = "right", sensor_noise: float = 0.0, jobs: int = 1) -> DatasetManifest:
    """Render ``n`` scenes under ``root`` and write the manifest.

    Scene i uses seed ``seed + i``, so the output does not depend on ``jobs``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if view not in ("left", "right"):
        raise ValueError("view must be 'left' or 'right'")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    tasks = [(i, seed + i, root, spec, rig, decal, view, sensor_noise) for i in range(n)]
    if jobs > 1 and n > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            records = list(ex.map(_build_one, tasks))
    else:
        records = [_build_one(t) for t in tasks]
    man = DatasetManifest(root, rig, defocus[0], defocus[1], records)
    write_manifest(man)
    return man

