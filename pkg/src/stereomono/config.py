"""Run configuration: one YAML file, parsed strictly into nested dataclasses."""
from __future__ import annotations

import dataclasses
import hashlib
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .calibration import DRIFT_STATISTICS, CalibConfig
from .defocus import DefocusModel, MonoSimSpec, PsiRange
from .fusion import FusionPolicy
from .geometry import Intrinsics
from .simulator import TextureSpec
from .stereo import MatcherConfig, StereoRig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    width: int = 256
    height: int = 256
    depth_range: tuple[float, float] = (0.35, 6.0)
    n_objects: int = 6
    texture: TextureSpec = field(default_factory=TextureSpec)


@dataclass(frozen=True)
class RigConfig:
    baseline: float = 0.1
    # null: max(width, height), principal point at the image center
    focal_px: float | None = None

    def build(self, width: int, height: int) -> StereoRig:
        k = Intrinsics.default_for(width, height)
        if self.focal_px is not None:
            k = Intrinsics(self.focal_px, self.focal_px, k.cx, k.cy)
        return StereoRig(baseline=self.baseline, focal_px=k.fx, intrinsics=k)


@dataclass(frozen=True)
class DefocusConfig:
    C: float = 9.0
    z_n: float = 1.5
    f: float = 0.016
    R: float = 1.14e-3

    def build(self) -> DefocusModel:
        if self.C <= 0:
            raise ConfigError("defocus coefficient C must be positive")
        return DefocusModel.from_coefficient(C=self.C, z_n=self.z_n, f=self.f, R=self.R)


@dataclass(frozen=True)
class DriftConfig:
    window: int = 3
    alpha: float = 1.5
    frames: int = 30
    statistic: str = "median_inverse_depth"
    # ignore mono pixels nearer than margin x the stereo minimum depth fB/max_disp
    near_margin: float = 1.1
    min_mono_coverage: float = 0.05

    def __post_init__(self):
        if self.window < 1 or self.frames < 1:
            raise ValueError("window and frames must be >= 1")
        if self.statistic not in DRIFT_STATISTICS:
            raise ValueError(f"statistic must be one of {DRIFT_STATISTICS}")
        if self.near_margin < 0 or not 0 <= self.min_mono_coverage <= 1:
            raise ValueError("near_margin >= 0 and min_mono_coverage in [0, 1] required")


@dataclass(frozen=True)
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    rig: RigConfig = field(default_factory=RigConfig)
    defocus_left: DefocusConfig = field(default_factory=DefocusConfig)
    defocus_right: DefocusConfig = field(default_factory=lambda: DefocusConfig(z_n=0.7))
    psi_range: PsiRange = field(default_factory=PsiRange)
    matcher: MatcherConfig = field(default_factory=MatcherConfig)
    calib: CalibConfig = field(default_factory=CalibConfig)
    fusion: FusionPolicy = field(default_factory=FusionPolicy)
    mono: MonoSimSpec = field(default_factory=MonoSimSpec)
    drift: DriftConfig = field(default_factory=DriftConfig)
    sensor_noise: float = 0.0
    output_dir: str = "out"
    seed: int = 0

    def stereo_rig(self) -> StereoRig:
        return self.rig.build(self.scene.width, self.scene.height)


def derive_seed(seed: int, tag: str) -> int:
    """Per-component seed: global seed plus a stable hash of the component tag."""
    h = int.from_bytes(hashlib.sha256(tag.encode()).digest()[:4], "little")
    return (int(seed) + h) % (2 ** 32)


def _convert(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return build(tp, value, where)
    if origin is typing.Union or origin is types.UnionType:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(f"{where}: expected a list of {len(args)} values")
        return tuple(_convert(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def build(cls, data: dict, where: str = ""):
    """Instantiate dataclass ``cls`` from a mapping; unknown keys are errors."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(where + k for k in unknown)}")
    kwargs = {k: _convert(hints[k], v, where + k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{where.rstrip('.') or 'config'}: {e}") from e


def parse_config(data: dict | None) -> RunConfig:
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping at top level")
    hints = typing.get_type_hints(RunConfig)
    unknown = sorted(set(data) - set(hints))
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(unknown)}")
    kwargs = {k: _convert(hints[k], v, k + "." if dataclasses.is_dataclass(hints[k]) else k)
              for k, v in data.items()}
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from e
    return parse_config(data)


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply ``section.key=value`` strings (values parsed as YAML scalars)."""
    data = to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(f"override {item!r}: {e}") from e
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config section in {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return parse_config(data)


def to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.init}
    if isinstance(obj, tuple):
        return [to_dict(v) for v in obj]
    return obj


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False, default_flow_style=None)


def describe_defaults() -> str:
    """Flat listing of every config key with its default, for --help."""
    lines = []

    def walk(d, prefix):
        for k, v in d.items():
            if isinstance(v, dict):
                walk(v, prefix + k + ".")
            else:
                lines.append(f"  {prefix}{k} = {v!r}")

    walk(to_dict(RunConfig()), "")
    return "\n".join(lines)
