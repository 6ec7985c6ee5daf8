"""Procedural multi-view talking-head clips.

The head is an ellipsoid whose frontal patch is the facial template mesh. Face
motion is a linear blend of hand-authored displacement bases (jaw, lip
corners, brows, cheeks, eyes) weighted by a per-frame speech envelope and the
clip's emotion class. The synthetic "speech" is band-limited noise plus a
voiced tone under the same envelope, so lip motion has a recoverable audio
correlate. Frames are rendered with the Gaussian rasterizer from a dense
Lambertian Gaussian proxy (one fixed directional light, black background).

Clip layout::

    cameras.json  frames/cam00..cam10/000000.png  geometry.bin  audio.wav
    emotions.json  landmarks.json  manifest.json
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio import to_pcm16, write_wav
from .core import Camera, GaussianCloud, InvalidInputError, logit, look_at_camera, rotmat_to_quat, sh_from_rgb
from .emotion import EmotionTimeline, class_label, class_name, parse_class
from .geometry import GeometryFormatError, GeometrySequence, read_header
from .mesh import TemplateMesh, mesh_upsample, vertex_normals
from .rasterizer import render, save_png

DATASET_FORMAT = 1
SAMPLE_RATE = 16000
LIGHT_DIR = np.array([-0.3, 0.5, 1.0]) / np.linalg.norm([-0.3, 0.5, 1.0])   # towards the light
SKIN = np.array([0.86, 0.64, 0.52])
HAIR = np.array([0.26, 0.17, 0.12])


# --------------------------------------------------------------------------
# head model

@dataclass
class HeadModelConfig:
    semi_axes: tuple = (0.080, 0.105, 0.092)
    face_azimuth_deg: float = 70.0
    face_elev_lo_deg: float = -55.0
    face_elev_hi_deg: float = 45.0
    n_elev: int = 13
    n_azim: int = 17
    proxy_levels: int = 2
    n_otf_proxy: int = 2500
    thickness: float = 0.18


@dataclass
class SyntheticRig:
    n_cameras: int = 11
    arc_deg: float = 180.0
    radius: float = 0.55
    width: int = 512
    height: int = 512
    target: tuple = (0.0, -0.02, 0.0)
    half_extent: float = 0.19

    def cameras(self):
        fx = self.width * self.radius / (2.0 * self.half_extent)
        out = []
        for k, az in enumerate(self.azimuths()):
            a = math.radians(az)
            pos = np.array([self.radius * math.sin(a), 0.0, self.radius * math.cos(a)]) + np.asarray(self.target)
            out.append(look_at_camera(pos, self.target, self.width, self.height, fx, name=f"cam{k:02d}"))
        return out

    def azimuths(self):
        if self.n_cameras == 1:
            return [0.0]
        return list(np.linspace(-self.arc_deg / 2, self.arc_deg / 2, self.n_cameras))


def orbit_camera(rig: SyntheticRig, azimuth_deg, elevation_deg=0.0, radius=None, name=""):
    r = rig.radius if radius is None else radius
    a, e = math.radians(azimuth_deg), math.radians(elevation_deg)
    pos = np.asarray(rig.target) + r * np.array([math.sin(a) * math.cos(e), math.sin(e), math.cos(a) * math.cos(e)])
    fx = rig.width * rig.radius / (2.0 * rig.half_extent)
    return look_at_camera(pos, rig.target, rig.width, rig.height, fx, name=name)


def _ellipsoid(cfg: HeadModelConfig, az, el, inflate=1.0):
    a, b, c = (s * inflate for s in cfg.semi_axes)
    return np.stack([a * np.sin(az) * np.cos(el), b * np.sin(el), c * np.cos(az) * np.cos(el)], axis=-1)


def _bump(az, el, az0, el0, waz, wel):
    return np.exp(-((az - az0) / waz) ** 2 - ((el - el0) / wel) ** 2)


def _angles(cfg: HeadModelConfig, uv):
    amax = math.radians(cfg.face_azimuth_deg)
    lo, hi = math.radians(cfg.face_elev_lo_deg), math.radians(cfg.face_elev_hi_deg)
    return (uv[:, 0] * 2 - 1) * amax, lo + uv[:, 1] * (hi - lo)


def _rest_surface(cfg: HeadModelConfig, uv):
    az, el = _angles(cfg, uv)
    p = _ellipsoid(cfg, az, el)
    d = np.radians
    nose = 0.016 * _bump(az, el, 0.0, d(-2.0), d(9.0), d(13.0))
    chin = 0.006 * _bump(az, el, 0.0, d(-48.0), d(18.0), d(8.0))
    p[:, 2] += nose + chin
    return p


LANDMARK_ANGLES = [
    (0, -22), (-8, -21), (8, -21), (-16, -22), (16, -22), (-24, -23), (24, -23),
    (0, -27), (-10, -27), (10, -27), (0, -40), (-20, -38), (20, -38),
    (-30, 24), (-18, 26), (-8, 24), (8, 24), (18, 26), (30, 24),
    (-20, 12), (20, 12), (0, -2),
]


def build_template(cfg: HeadModelConfig | None = None) -> TemplateMesh:
    """Neutral (rest) facial template on the frontal ellipsoid patch."""
    cfg = cfg or HeadModelConfig()
    u = np.linspace(0.0, 1.0, cfg.n_azim)
    v = np.linspace(0.0, 1.0, cfg.n_elev)
    uu, vv = np.meshgrid(u, v)           # rows: elevation, cols: azimuth
    uv = np.stack([uu.ravel(), vv.ravel()], axis=1)
    verts = _rest_surface(cfg, uv)
    faces = []
    for i in range(cfg.n_elev - 1):
        for j in range(cfg.n_azim - 1):
            a = i * cfg.n_azim + j
            b, c, d = a + 1, a + cfg.n_azim, a + cfg.n_azim + 1
            faces += [(a, b, c), (b, d, c)]   # outward (+z) normals
    az, el = _angles(cfg, uv)
    lm = [int(np.argmin((az - math.radians(a)) ** 2 + (el - math.radians(e)) ** 2)) for a, e in LANDMARK_ANGLES]
    return TemplateMesh(verts, np.asarray(faces), uv, np.asarray(lm))


BASES = ("jaw", "spread", "corner_down", "brow_raise", "brow_furrow", "cheek", "eye_widen")

EMOTION_BASIS_WEIGHTS = {
    "neutral": {},
    "angry": {"brow_furrow": 1.0, "corner_down": 0.3},
    "contempt": {"spread": 0.6, "cheek": 0.3},
    "disgusted": {"brow_furrow": 0.6, "cheek": 0.8},
    "fear": {"brow_raise": 0.8, "eye_widen": 1.0, "spread": 0.4},
    "happy": {"spread": 1.0, "cheek": 1.0},
    "sad": {"corner_down": 1.0, "brow_raise": 0.4},
    "surprised": {"brow_raise": 1.0, "eye_widen": 1.0, "jaw": 0.35},
}


def basis_displacements(cfg: HeadModelConfig, uv):
    """``{basis: (V, 3)}`` displacement fields in metres at unit activation."""
    az, el = _angles(cfg, uv)
    d = np.radians
    s = np.sign(az)
    out = {}
    below = np.clip((d(-20.0) - el) / d(8.0), 0.0, 1.0) * np.exp(-(az / d(40.0)) ** 2)
    out["jaw"] = 0.012 * below[:, None] * np.array([0.0, -1.0, -0.25])
    sp = _bump(np.abs(az), el, d(26.0), d(-22.0), d(12.0), d(9.0))
    out["spread"] = 0.005 * sp[:, None] * np.stack([s, np.full_like(s, 0.3), np.full_like(s, -0.2)], axis=1)
    cd = _bump(np.abs(az), el, d(24.0), d(-25.0), d(10.0), d(8.0))
    out["corner_down"] = 0.004 * cd[:, None] * np.array([0.0, -1.0, 0.0])
    br = _bump(np.abs(az), el, d(20.0), d(25.0), d(22.0), d(10.0))
    out["brow_raise"] = 0.006 * br[:, None] * np.array([0.0, 1.0, 0.1])
    bf = _bump(np.abs(az), el, d(10.0), d(22.0), d(12.0), d(8.0))
    out["brow_furrow"] = 0.005 * bf[:, None] * np.stack([-0.5 * s, -np.ones_like(s), 0.3 * np.ones_like(s)], axis=1)
    ch = _bump(np.abs(az), el, d(32.0), d(-5.0), d(14.0), d(12.0))
    out["cheek"] = 0.004 * ch[:, None] * np.array([0.0, 0.6, 1.0])
    ew = _bump(np.abs(az), el, d(20.0), d(13.0), d(9.0), d(4.0))
    out["eye_widen"] = 0.002 * ew[:, None] * np.array([0.0, 1.0, 0.0])
    return out


def emotion_weights(class_idx: int) -> dict:
    label, intensity = class_label(class_idx)
    scale = 1.0 if intensity in (None, "strong") else 0.5
    return {k: scale * v for k, v in EMOTION_BASIS_WEIGHTS[label].items()}


def activations(class_idx: int, envelope):
    """Per-frame basis activations ``{basis: (T,)}``."""
    env = np.asarray(envelope, dtype=np.float64)
    w = emotion_weights(class_idx)
    act = {b: np.full(env.shape, w.get(b, 0.0)) for b in BASES}
    act["jaw"] = act["jaw"] + env
    act["spread"] = act["spread"] + 0.25 * env
    return act


def deform(cfg: HeadModelConfig, template: TemplateMesh, class_idx: int, envelope):
    """Ground-truth facial vertices ``(T, V, 3)``."""
    bases = basis_displacements(cfg, template.uv)
    act = activations(class_idx, envelope)
    verts = np.repeat(template.vertices[None], len(envelope), axis=0)
    for b in BASES:
        verts += act[b][:, None, None] * bases[b][None]
    return verts


# --------------------------------------------------------------------------
# speech surrogate

def speech_envelope(duration, seed, rate=None):
    """Syllable-like envelope in [0, 1] as a function of time; silent for the first 0.2 s."""
    rng = np.random.default_rng(seed)
    sylls = []
    t = 0.2 + rng.uniform(0.0, 0.1)
    while t < duration - 0.15:
        length = rng.uniform(0.14, 0.28)
        sylls.append((t, length, rng.uniform(0.55, 1.0)))
        t += length + rng.uniform(0.03, 0.15)

    def env(times):
        times = np.asarray(times, dtype=np.float64)
        out = np.zeros_like(times)
        for start, length, amp in sylls:
            x = (times - start) / length
            inside = (x >= 0) & (x <= 1)
            out = np.maximum(out, np.where(inside, amp * np.sin(np.pi * np.clip(x, 0, 1)) ** 2, 0.0))
        return out

    return env


def synth_speech(env, duration, seed, sample_rate=SAMPLE_RATE):
    rng = np.random.default_rng(seed + 7919)
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    noise = rng.normal(size=n)
    spec = np.fft.rfft(noise)
    f = np.fft.rfftfreq(n, 1.0 / sample_rate)
    spec[(f < 200) | (f > 4000)] = 0.0
    noise = np.fft.irfft(spec, n)
    noise /= max(np.abs(noise).max(), 1e-9)
    voiced = sum(np.sin(2 * np.pi * 140.0 * k * t) / k for k in range(1, 6))
    sig = env(t) * (0.6 * noise + 0.4 * voiced / 2.3)
    return 0.8 * sig / max(np.abs(sig).max(), 1e-9)


# --------------------------------------------------------------------------
# appearance and Gaussian proxy

def face_albedo(cfg: HeadModelConfig, uv, act_t):
    """Albedo on the face patch at one frame; forehead wrinkles and mouth shadow depend on activations."""
    az, el = _angles(cfg, uv)
    d = np.radians
    col = np.tile(SKIN, (len(uv), 1))
    lips = _bump(az, el, 0.0, d(-22.5), d(18.0), d(3.5))
    col = col * (1 - 0.4 * lips[:, None]) + 0.4 * lips[:, None] * np.array([0.72, 0.30, 0.32])
    brow = _bump(np.abs(az), el, d(19.0), d(27.0), d(11.0), d(2.5))
    col = col * (1 - 0.75 * brow[:, None]) + 0.75 * brow[:, None] * np.array([0.22, 0.14, 0.10])
    eye = _bump(np.abs(az), el, d(19.0), d(12.0), d(6.0), d(2.5))
    col = col * (1 - 0.85 * eye[:, None]) + 0.85 * eye[:, None] * np.array([0.15, 0.12, 0.12])
    cheek = _bump(np.abs(az), el, d(32.0), d(-8.0), d(10.0), d(8.0))
    col = col * (1 - 0.15 * cheek[:, None]) + 0.15 * cheek[:, None] * np.array([0.9, 0.45, 0.45])
    # expression-dependent detail
    forehead = np.clip((el - d(30.0)) / d(5.0), 0, 1) * np.exp(-(az / d(35.0)) ** 2)
    stripes = 0.5 + 0.5 * np.cos(el / d(2.2) * np.pi)
    wrinkle = forehead * stripes * np.clip(act_t["brow_raise"] + act_t["brow_furrow"], 0, 1.5)
    col = col * (1.0 - 0.45 * wrinkle[:, None])
    furrow = _bump(az, el, 0.0, d(20.0), d(5.0), d(6.0)) * act_t["brow_furrow"]
    col = col * (1.0 - 0.5 * furrow[:, None])
    mouth = _bump(az, el, 0.0, d(-22.5), d(14.0), d(2.5)) * np.clip(act_t["jaw"], 0, 1.2)
    col = col * (1.0 - 0.7 * mouth[:, None])
    return np.clip(col, 0.0, 1.0)


def shade(albedo, normals):
    lam = np.maximum(0.0, normals @ LIGHT_DIR)
    return np.clip(albedo * (0.35 + 0.65 * lam[:, None]), 0.0, 1.0)


def frames_to_quats(normals):
    """Quaternions whose local z axis is ``normals`` (tangent frame arbitrary but smooth)."""
    ref = np.where(np.abs(normals[:, 1:2]) < 0.9, np.array([[0.0, 1.0, 0.0]]), np.array([[1.0, 0.0, 0.0]]))
    t1 = np.cross(ref, normals)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(normals, t1)
    R = np.stack([t1, t2, normals], axis=2)
    return rotmat_to_quat(R)


def surface_gaussians(points, normals, colors, spacing, opacity=0.98, thin=0.15):
    n = len(points)
    spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (n,))
    ls = np.log(np.stack([0.6 * spacing, 0.6 * spacing, thin * 0.6 * spacing], axis=1))
    return GaussianCloud(points, ls, frames_to_quats(normals), np.full(n, logit(opacity)), sh_from_rgb(colors))


def _fibonacci_sphere(n):
    k = np.arange(n) + 0.5
    el = np.arcsin(1 - 2 * k / n)
    az = np.pi * (1 + 5 ** 0.5) * k
    return np.mod(az + np.pi, 2 * np.pi) - np.pi, el


def otf_surface(cfg: HeadModelConfig):
    """Static non-facial surface: hair shell outside the face patch and a neck cylinder.

    Returns ``(points, normals, colors, spacing)``.
    """
    n_neck = cfg.n_otf_proxy // 4
    n_hair = cfg.n_otf_proxy - n_neck
    az, el = _fibonacci_sphere(int(n_hair * 1.9))
    amax = math.radians(cfg.face_azimuth_deg + 2)
    lo, hi = math.radians(cfg.face_elev_lo_deg - 2), math.radians(cfg.face_elev_hi_deg + 2)
    in_face = (np.abs(az) < amax) & (el > lo) & (el < hi)
    keep = ~in_face & (el > math.radians(-40))
    az, el = az[keep], el[keep]
    hp = _ellipsoid(cfg, az, el, inflate=1.02)
    a, b, c = (s * 1.02 for s in cfg.semi_axes)
    hn = hp / np.array([a * a, b * b, c * c])
    hn /= np.linalg.norm(hn, axis=1, keepdims=True)
    shade_var = 0.85 + 0.15 * np.cos(7 * az) * np.cos(5 * el)
    hc = HAIR[None] * shade_var[:, None]
    area = 4 * math.pi * (np.prod(cfg.semi_axes) ** (2 / 3))
    hs = math.sqrt(area / max(1, int(n_hair * 1.9)))

    r = 0.048
    n_ring = max(8, int(round(math.sqrt(n_neck * 2 * math.pi * r / 0.10))))
    n_rows = max(2, n_neck // n_ring)
    n_neck = n_ring * n_rows
    ang, y = np.meshgrid(np.linspace(-math.pi, math.pi, n_ring, endpoint=False), np.linspace(-0.17, -0.07, n_rows))
    ang, y = ang.ravel(), y.ravel()
    npnt = np.stack([r * np.sin(ang), y, r * np.cos(ang) - 0.01], axis=1)
    nn = np.stack([np.sin(ang), np.zeros_like(ang), np.cos(ang)], axis=1)
    nc = np.tile(SKIN * 0.9, (n_neck, 1))
    ns = math.sqrt(2 * math.pi * r * 0.10 / n_neck)
    pts = np.concatenate([hp, npnt])
    nrm = np.concatenate([hn, nn])
    col = np.concatenate([shade(hc, hn), shade(nc, nn)])
    spacing = np.concatenate([np.full(len(hp), hs), np.full(n_neck, ns)])
    return pts, nrm, col, spacing


def proxy_cloud(cfg: HeadModelConfig, template: TemplateMesh, verts_t, act_t, otf=None):
    """Dense Gaussian proxy of the ground-truth head at one frame."""
    v, f, (uv,) = mesh_upsample(verts_t, template.faces, cfg.proxy_levels, [template.uv])
    nrm = vertex_normals(v, f)
    col = shade(face_albedo(cfg, uv, act_t), nrm)
    spacing = _vertex_spacing(v, f)
    face = surface_gaussians(v, nrm, col, spacing)
    face.is_facial[:] = True
    face.uv = uv
    if otf is None:
        otf = otf_surface(cfg)
    pts, on, oc, osp = otf
    return GaussianCloud.concat([face, surface_gaussians(pts, on, oc, osp)])


def _vertex_spacing(v, f):
    from .mesh import unique_edges
    edges, _ = unique_edges(f)
    lengths = np.linalg.norm(v[edges[:, 0]] - v[edges[:, 1]], axis=1)
    acc = np.zeros(len(v))
    cnt = np.zeros(len(v))
    np.add.at(acc, edges[:, 0], lengths)
    np.add.at(acc, edges[:, 1], lengths)
    np.add.at(cnt, edges[:, 0], 1)
    np.add.at(cnt, edges[:, 1], 1)
    return acc / np.maximum(cnt, 1)


# --------------------------------------------------------------------------
# clip generation

@dataclass
class ClipConfig:
    emotion: str = "neutral"
    duration: float = 2.0
    fps: float = 25.0
    seed: int = 0
    rig: SyntheticRig = field(default_factory=SyntheticRig)
    head: HeadModelConfig = field(default_factory=HeadModelConfig)
    unit_scale_mm: float = 1000.0

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        rig = SyntheticRig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("rig", {}).items()})
        head = HeadModelConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("head", {}).items()})
        return cls(rig=rig, head=head, **d)


def clip_name(class_idx: int, seed: int) -> str:
    return f"{class_name(class_idx)}_s{seed:03d}"


def clip_signals(config: ClipConfig) -> dict:
    """Everything about a clip except its rendered frames."""
    cfg = config
    if cfg.duration <= 0:
        raise InvalidInputError("duration must be positive")
    cls_idx = parse_class(cfg.emotion)
    n_frames = max(1, int(math.floor(cfg.duration * cfg.fps + 0.5)))
    env_fn = speech_envelope(cfg.duration, cfg.seed)
    env = env_fn(np.arange(n_frames) / cfg.fps)
    template = build_template(cfg.head)
    # quantise the waveform exactly as the WAV file will
    wav = to_pcm16(synth_speech(env_fn, cfg.duration, cfg.seed)) / 32768.0
    return {
        "class_index": cls_idx, "n_frames": n_frames, "envelope": env, "template": template,
        "vertices": deform(cfg.head, template, cls_idx, env), "activations": activations(cls_idx, env),
        "waveform": wav,
    }


def generate_clip(out_dir, config: ClipConfig) -> Path:
    """Render one clip into ``out_dir``; deterministic given the config."""
    cfg = config
    sig = clip_signals(cfg)
    cls_idx, n_frames, template, verts, act = (sig[k] for k in ("class_index", "n_frames", "template",
                                                                 "vertices", "activations"))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    cams = cfg.rig.cameras()
    (out / "cameras.json").write_text(json.dumps([c.to_dict() for c in cams], indent=1))
    GeometrySequence(verts, cfg.fps).save(out / "geometry.bin")
    write_wav(out / "audio.wav", sig["waveform"], SAMPLE_RATE)
    EmotionTimeline.constant(cls_idx, n_frames).save(out / "emotions.json")
    (out / "landmarks.json").write_text(json.dumps({"vertex_indices": template.landmarks.tolist()}))

    otf = otf_surface(cfg.head)
    for t in range(n_frames):
        cloud = proxy_cloud(cfg.head, template, verts[t], {b: act[b][t] for b in BASES}, otf)
        for k, cam in enumerate(cams):
            save_png(render(cloud, cam), out / "frames" / f"cam{k:02d}" / f"{t:06d}.png")

    manifest = {
        "format": DATASET_FORMAT,
        "clip": out.name,
        "emotion": class_name(cls_idx),
        "class_index": cls_idx,
        "duration": cfg.duration,
        "fps": cfg.fps,
        "n_frames": n_frames,
        "n_cameras": len(cams),
        "seed": cfg.seed,
        "unit_scale_mm": cfg.unit_scale_mm,
        "template_vertices": template.n_vertices,
        "sample_rate": SAMPLE_RATE,
        "config": _jsonable(asdict(cfg)),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def generate_dataset(root, emotions, duration=2.0, fps=25.0, seed=0, rig=None, head=None, clips_per_emotion=1):
    """Generate several clips under ``root`` plus a root ``manifest.json``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    names = []
    k = 0
    for rep in range(clips_per_emotion):
        for spec in emotions:
            cls_idx = parse_class(spec) if isinstance(spec, str) else int(spec)
            clip_seed = seed * 1000 + k
            cfg = ClipConfig(class_name(cls_idx), duration, fps, clip_seed, rig or SyntheticRig(),
                             head or HeadModelConfig())
            name = clip_name(cls_idx, clip_seed)
            generate_clip(root / name, cfg)
            names.append(name)
            k += 1
    (root / "manifest.json").write_text(json.dumps({"format": DATASET_FORMAT, "clips": names}, indent=1))
    return names


# --------------------------------------------------------------------------
# loading

@dataclass
class Clip:
    path: Path
    manifest: dict
    cameras: list
    geometry: GeometrySequence
    timeline: EmotionTimeline
    landmarks: np.ndarray

    @property
    def name(self):
        return self.path.name

    @property
    def n_frames(self):
        return self.manifest["n_frames"]

    def image(self, cam_index, frame):
        from .rasterizer import load_png
        return load_png(self.path / "frames" / f"cam{cam_index:02d}" / f"{frame:06d}.png")

    def config(self) -> ClipConfig:
        return ClipConfig.from_dict(self.manifest["config"])

    def template(self) -> TemplateMesh:
        return build_template(self.config().head)

    def audio(self):
        from .audio import read_wav
        return read_wav(self.path / "audio.wav")


def load_cameras(path):
    return [Camera.from_dict(d) for d in json.loads(Path(path).read_text())]


def load_clip(path) -> Clip:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    geom = GeometrySequence.load(path / "geometry.bin")
    tl = EmotionTimeline.load(path / "emotions.json", manifest["n_frames"])
    lm = np.asarray(json.loads((path / "landmarks.json").read_text())["vertex_indices"], dtype=np.int64)
    return Clip(path, manifest, load_cameras(path / "cameras.json"), geom, tl, lm)


def list_clips(root):
    root = Path(root)
    if (root / "cameras.json").exists():
        return [root]
    m = json.loads((root / "manifest.json").read_text())
    return [root / c for c in m["clips"]]


# --------------------------------------------------------------------------
# split and validation

def split_dataset(clips, ratio=(4, 1), seed=0):
    """Random clip-level train/test split; returns ``{"train": [...], "test": [...]}``."""
    clips = [str(c) for c in clips]
    if len(clips) < 5:
        from .s2g import ConfigurationError
        raise ConfigurationError(f"need at least 5 clips to split, got {len(clips)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(clips))
    n_test = int(round(len(clips) * ratio[1] / (ratio[0] + ratio[1])))
    test = sorted(clips[i] for i in order[:n_test])
    train = sorted(clips[i] for i in order[n_test:])
    return {"train": train, "test": test, "ratio": list(ratio), "seed": seed}


def validate_clip(path):
    path = Path(path)
    errors = []

    def err(kind, detail):
        errors.append({"clip": path.name, "kind": kind, "detail": detail})

    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        err("manifest", str(exc))
        return errors
    T = manifest.get("n_frames", 0)
    try:
        cams = load_cameras(path / "cameras.json")
    except (OSError, ValueError, KeyError) as exc:
        err("calibration", str(exc))
        cams = []
    for k, cam in enumerate(cams):
        target = np.asarray(manifest.get("config", {}).get("rig", {}).get("target", (0.0, -0.02, 0.0)))
        uv, z = cam.project(target[None])
        if z[0] <= 0 or np.abs(uv[0] - [cam.cx, cam.cy]).max() > 0.5:
            err("calibration", f"cam{k:02d} does not look at the head centre")
    for k in range(len(cams)):
        d = path / "frames" / f"cam{k:02d}"
        for t in range(T):
            if not (d / f"{t:06d}.png").exists():
                err("missing_frame", f"cam{k:02d}/{t:06d}.png")
    try:
        hdr = read_header(path / "geometry.bin")
        GeometrySequence.load(path / "geometry.bin")
        if hdr["frames"] != T:
            err("alignment", f"geometry has {hdr['frames']} frames, manifest {T}")
    except GeometryFormatError as exc:
        err("format", f"geometry.bin: {exc}")
    except OSError as exc:
        err("missing_file", f"geometry.bin: {exc}")
    try:
        EmotionTimeline.load(path / "emotions.json", T)
    except (OSError, ValueError, KeyError) as exc:
        err("emotions", str(exc))
    for name in ("audio.wav", "landmarks.json"):
        if not (path / name).exists():
            err("missing_file", name)
    return errors


def validate_dataset(path):
    """Machine-readable report ``{"ok", "clips", "errors"}``; problems never raise."""
    path = Path(path)
    try:
        clips = list_clips(path)
    except (OSError, ValueError, KeyError) as exc:
        return {"ok": False, "clips": 0, "errors": [{"clip": path.name, "kind": "manifest", "detail": str(exc)}]}
    errors = []
    for c in clips:
        errors += validate_clip(c)
    return {"ok": not errors, "clips": len(clips), "errors": errors}
