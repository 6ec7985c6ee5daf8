"""Run configuration and free-view camera paths."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

from .core import InvalidInputError
from .g2a import CanonicalConfig, G2AConfig
from .s2g import ConfigurationError, S2GConfig


@dataclass
class DataConfig:
    emotions: list = field(default_factory=lambda: ["neutral", "happy strong", "angry strong"])
    clips_per_emotion: int = 2
    duration: float = 2.0
    fps: float = 25.0
    width: int = 512
    height: int = 512
    n_cameras: int = 11
    proxy_levels: int = 2
    n_otf_proxy: int = 2500
    split_ratio: tuple = (4, 1)


@dataclass
class CanonicalStage:
    train: CanonicalConfig = field(default_factory=CanonicalConfig)
    otf_count: int = 5000
    clip: str = ""              # default: first neutral training clip
    views: list = field(default_factory=list)   # default: every camera
    facial_levels: int = 1


@dataclass
class DynamicStage:
    train: G2AConfig = field(default_factory=G2AConfig)
    frame_stride: int = 1
    views: list = field(default_factory=list)


@dataclass
class SynthStage:
    path: list = field(default_factory=list)    # keyframes; empty means a -90..+90 sweep
    fps: float = 25.0


@dataclass
class RunConfig:
    seed: int = 0
    unit_scale_mm: float = 1000.0
    background: tuple = (0.0, 0.0, 0.0)
    no_emotion: bool = False
    no_featurenet: bool = False
    eval_camera: int = 5
    data: DataConfig = field(default_factory=DataConfig)
    s2g: S2GConfig = field(default_factory=S2GConfig)
    canonical: CanonicalStage = field(default_factory=CanonicalStage)
    dynamic: DynamicStage = field(default_factory=DynamicStage)
    synth: SynthStage = field(default_factory=SynthStage)

    def to_dict(self):
        return asdict(self)

    def resolved(self):
        """Copy with the top-level seed and ablation flags pushed into the stage configs."""
        d = self.to_dict()
        d["s2g"]["no_emotion"] = bool(self.no_emotion or self.s2g.no_emotion)
        d["dynamic"]["train"]["no_featurenet"] = bool(self.no_featurenet or self.dynamic.train.no_featurenet)
        d["s2g"]["seed"] = self.seed
        d["canonical"]["train"]["seed"] = self.seed
        d["dynamic"]["train"]["seed"] = self.seed
        return RunConfig.from_dict(d)

    @classmethod
    def from_dict(cls, d):
        return _build(cls, d or {}, "config")

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


def _build(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigurationError(f"{where}: expected a table, got {type(d).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in d.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{where}.{name}")
        elif isinstance(current, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def load_config(path=None, overrides=None) -> RunConfig:
    """Read a TOML or JSON config file; ``overrides`` is a nested dict merged on top."""
    d = {}
    if path:
        p = Path(path)
        text = p.read_bytes()
        if p.suffix.lower() == ".json":
            d = json.loads(text)
        else:
            try:
                import tomllib
            except ModuleNotFoundError:      # Python < 3.11
                import tomli as tomllib
            try:
                d = tomllib.loads(text.decode("utf-8"))
            except tomllib.TOMLDecodeError as exc:
                raise ConfigurationError(f"{path}: {exc}") from exc
    _merge(d, overrides or {})
    return RunConfig.from_dict(d)


def _merge(dst, src):
    for k, v in src.items():
        if isinstance(v, dict) and isinstance(dst.get(k), dict):
            _merge(dst[k], v)
        else:
            dst[k] = v
    return dst


# --------------------------------------------------------------------------
# camera paths

AZIMUTH_LIMIT = 90.0


@dataclass
class Keyframe:
    time: float
    azimuth: float
    elevation: float = 0.0
    radius: float | None = None


@dataclass
class CameraPath:
    keyframes: list

    def __post_init__(self):
        ks = [k if isinstance(k, Keyframe) else Keyframe(**k) for k in self.keyframes]
        if not ks:
            raise InvalidInputError("camera path has no keyframes")
        for a, b in zip(ks[:-1], ks[1:]):
            if b.time <= a.time:
                raise InvalidInputError("camera path times must increase")
        for k in ks:
            if abs(k.azimuth) > AZIMUTH_LIMIT:
                raise InvalidInputError(f"azimuth {k.azimuth} outside the rig's +-{AZIMUTH_LIMIT} degree coverage")
        self.keyframes = ks

    @classmethod
    def sweep(cls, duration, start=-90.0, end=90.0, elevation=0.0):
        return cls([Keyframe(0.0, start, elevation), Keyframe(max(duration, 1e-6), end, elevation)])

    def at(self, t):
        ks = self.keyframes
        times = np.array([k.time for k in ks])
        def interp(vals):
            return float(np.interp(t, times, vals))
        radii = [k.radius for k in ks]
        radius = None if any(r is None for r in radii) else interp(radii)
        return interp([k.azimuth for k in ks]), interp([k.elevation for k in ks]), radius

    def to_list(self):
        return [asdict(k) for k in self.keyframes]

    @classmethod
    def load(cls, path):
        data = json.loads(Path(path).read_text())
        return cls(data["keyframes"] if isinstance(data, dict) else data)
