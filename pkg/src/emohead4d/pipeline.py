"""Stage orchestration shared by the command line and the acceptance runs.

Run directory layout::

    config.resolved.json
    s2g.ckpt        s2g_loss.csv
    canonical.ckpt  canonical_loss.csv
    dynamic.ckpt    dynamic_loss.csv
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .audio import extract_audio_features, read_wav
from .completion import HeadCompletion, build_completion
from .config import CameraPath, RunConfig
from .datagen import Clip, SyntheticRig, list_clips, load_clip, orbit_camera
from .emotion import EmotionTimeline, class_name
from .g2a import (CanonicalHead, DynamicSample, G2AConfig, facial_points_from_geometry, head_bounds,
                  init_head_cloud, load_canonical, load_g2a, render_frame, save_canonical, save_g2a,
                  train_canonical, train_dynamic)
from .core import InvalidInputError
from .geometry import GeometrySequence
from .mesh import TemplateMesh, mesh_upsample
from .s2g import ConfigurationError, S2GClip, S2GConfig, load_s2g, predict_batch, s2g_forward, save_s2g, train_s2g

STAGES = ("s2g", "canonical", "dynamic")
CKPT = {s: f"{s}.ckpt" for s in STAGES}


class StageOrderError(RuntimeError):
    def __init__(self, stage, missing):
        super().__init__(f"stage {stage!r} needs {missing}; run that stage first")
        self.missing = missing


def write_loss_csv(path, losses):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])


# --------------------------------------------------------------------------
# data access

def load_clips(root):
    return [load_clip(p) for p in list_clips(root)]


def read_split(root):
    p = Path(root) / "split.json"
    if not p.exists():
        raise ConfigurationError(f"{root} has no split.json; generate data with the CLI or split_dataset")
    return json.loads(p.read_text())


def split_clips(root, which):
    root = Path(root)
    return [load_clip(root / name) for name in read_split(root)[which]]


def clip_features(clip: Clip):
    wav, sr = clip.audio()
    feat = extract_audio_features(wav, sr, clip.manifest["fps"])
    if len(feat) != clip.n_frames:
        raise InvalidInputError(f"{clip.name}: {len(feat)} audio rows vs {clip.n_frames} frames")
    return feat


def s2g_dataset(clips):
    return [S2GClip(clip_features(c).frames, c.timeline.labels, c.geometry.vertices) for c in clips]


def facial_mesh(template: TemplateMesh, levels=1):
    """Faces and UVs of the upsampled facial mesh (the canonical facial point set)."""
    _, faces, (uv,) = mesh_upsample(template.vertices, template.faces, levels, [template.uv])
    return faces, uv


# --------------------------------------------------------------------------
# stages

def fit_s2g(clips, cfg: S2GConfig):
    template = clips[0].template()
    weights, losses = train_s2g(s2g_dataset(clips), template, cfg)
    return weights, template, losses


def canonical_clip(clips, name=""):
    if name:
        for c in clips:
            if c.name == name:
                return c
        raise ConfigurationError(f"canonical clip {name!r} not found")
    neutral = [c for c in clips if c.timeline.labels[0] == 0]
    return (neutral or clips)[0]


def fit_canonical(clip: Clip, cfg: RunConfig, callback=None) -> CanonicalHead:
    st = cfg.canonical
    template = clip.template()
    views = list(st.views) or list(range(len(clip.cameras)))
    faces, uv = facial_mesh(template, st.facial_levels)
    facial = facial_points_from_geometry(clip.geometry.vertices[0], template.faces, st.facial_levels)
    init = init_head_cloud(facial, faces, uv, st.otf_count, head_bounds(clip.config().rig.target), seed=cfg.seed)
    images = [clip.image(v, 0) for v in views]
    return train_canonical(images, [clip.cameras[v] for v in views], init, st.train, callback)


def embedding_table(s2g_weights, no_emotion=False):
    e = np.asarray(s2g_weights["embed"], dtype=np.float64)
    return np.zeros_like(e) if no_emotion else e


def dynamic_samples(clips, embed, cfg: RunConfig):
    st = cfg.dynamic
    out = []
    for c in clips:
        template = c.template()
        views = list(st.views) or list(range(len(c.cameras)))
        for t in range(0, c.n_frames, max(1, st.frame_stride)):
            facial = facial_points_from_geometry(c.geometry.vertices[t], template.faces, cfg.canonical.facial_levels)
            out.append(DynamicSample(facial, embed[c.timeline.labels[t]], [c.image(v, t) for v in views],
                                     [c.cameras[v] for v in views]))
    return out


def run_stage(stage, data_root, run_dir, cfg: RunConfig, force=False, log=print):
    """Train one stage into ``run_dir``; a finished stage with the same config is not re-run."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg = cfg.resolved()
    ckpt = run_dir / CKPT[stage]
    stamp = run_dir / f"{stage}.config.json"
    cfg_text = json.dumps(cfg.to_dict(), sort_keys=True)
    if ckpt.exists() and stamp.exists() and stamp.read_text() == cfg_text and not force:
        log(f"{stage}: up to date ({ckpt})")
        return ckpt
    train = split_clips(data_root, "train")
    if not train:
        raise ConfigurationError("training split is empty")
    if stage == "s2g":
        weights, template, losses = fit_s2g(train, cfg.s2g)
        save_s2g(ckpt, weights, template, cfg.s2g)
    elif stage == "canonical":
        clip = canonical_clip(train, cfg.canonical.clip)
        head = fit_canonical(clip, cfg)
        rig = clip.manifest["config"]["rig"]
        save_canonical(ckpt, head, {"clip": clip.name, "rig": rig, "facial_levels": cfg.canonical.facial_levels,
                                    "unit_scale_mm": cfg.unit_scale_mm})
        losses = head.losses
        log(f"canonical: status {head.status}")
    else:
        for need in ("canonical", "s2g"):
            if not (run_dir / CKPT[need]).exists():
                raise StageOrderError("dynamic", str(run_dir / CKPT[need]))
        head, _ = load_canonical(run_dir / CKPT["canonical"])
        s2g_w, _, s2g_cfg, _ = load_s2g(run_dir / CKPT["s2g"])
        embed = embedding_table(s2g_w, s2g_cfg.no_emotion)
        samples = dynamic_samples(train, embed, cfg)
        comp = build_completion(head.cloud, cfg.unit_scale_mm)
        weights, losses = train_dynamic(samples, head, cfg.dynamic.train, comp, cfg.unit_scale_mm)
        save_g2a(ckpt, weights, cfg.dynamic.train, embed, {"unit_scale_mm": cfg.unit_scale_mm})
    write_loss_csv(run_dir / f"{stage}_loss.csv", losses)
    stamp.write_text(cfg_text)
    cfg.save(run_dir / "config.resolved.json")
    return ckpt


# --------------------------------------------------------------------------
# inference

@dataclass
class Models:
    s2g: dict
    template: TemplateMesh
    s2g_config: S2GConfig
    head: CanonicalHead
    completion: HeadCompletion
    g2a: dict
    embed: np.ndarray
    g2a_config: G2AConfig
    rig: SyntheticRig
    facial_levels: int = 1

    def embedding(self, label):
        return self.embed[int(label)]


def load_models(run_dir) -> Models:
    run_dir = Path(run_dir)
    for s in STAGES:
        if not (run_dir / CKPT[s]).exists():
            raise StageOrderError("synth", str(run_dir / CKPT[s]))
    s2g_w, template, s2g_cfg, _ = load_s2g(run_dir / CKPT["s2g"])
    head, meta = load_canonical(run_dir / CKPT["canonical"])
    g2a_w, embed, g2a_cfg, gmeta = load_g2a(run_dir / CKPT["dynamic"])
    rig = SyntheticRig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["rig"].items()})
    comp = build_completion(head.cloud, gmeta.get("unit_scale_mm", 1000.0))
    return Models(s2g_w, template, s2g_cfg, head, comp, g2a_w, embed, g2a_cfg, rig, meta.get("facial_levels", 1))


def path_cameras(path: CameraPath, n_frames, fps, rig: SyntheticRig):
    cams = []
    for t in range(n_frames):
        az, el, r = path.at(t / fps)
        cams.append(orbit_camera(rig, az, el, r, name=f"path{t:06d}"))
    return cams


def default_sweep(n_frames, fps):
    return CameraPath.sweep((n_frames - 1) / fps if n_frames > 1 else 1.0)


def predict_geometry(models: Models, features, timeline: EmotionTimeline) -> GeometrySequence:
    return s2g_forward(features, timeline, models.template, models.s2g, models.s2g_config.no_emotion)


def synthesize(models: Models, features, timeline: EmotionTimeline, cameras, background=(0.0, 0.0, 0.0)):
    """Render one frame per feature row; returns ``(frames, geometry)``."""
    if len(timeline) != len(features):
        raise InvalidInputError(f"emotion timeline has {len(timeline)} frames, audio has {len(features)}")
    if len(cameras) != len(features):
        raise InvalidInputError(f"{len(cameras)} cameras for {len(features)} frames")
    geom = predict_geometry(models, features, timeline)
    frames = []
    for t in range(geom.n_frames):
        facial = facial_points_from_geometry(geom.vertices[t], models.template.faces, models.facial_levels)
        e = models.embedding(timeline.labels[t])
        fr, _, _ = render_frame(models.head, models.completion, facial, e, models.g2a, cameras[t], background,
                                models.g2a_config.delta_scale)
        frames.append(fr)
    return frames, geom


def synthesize_from_wav(models: Models, wav_path, timeline_spec=None, cameras=None, path=None, fps=25.0,
                        background=(0.0, 0.0, 0.0)):
    wav, sr = read_wav(wav_path)
    feat = extract_audio_features(wav, sr, fps)
    timeline = resolve_timeline(timeline_spec, len(feat))
    if cameras is None:
        cameras = path_cameras(path or default_sweep(len(feat), fps), len(feat), fps, models.rig)
    elif len(cameras) == 1:
        cameras = list(cameras) * len(feat)
    frames, geom = synthesize(models, feat, timeline, cameras, background)
    return frames, geom, timeline, cameras


def resolve_timeline(spec, n_frames) -> EmotionTimeline:
    """``None`` (neutral), a class spec such as ``"happy strong"``, or a JSON segments file."""
    from .emotion import parse_class
    if spec is None:
        return EmotionTimeline.constant(0, n_frames)
    if isinstance(spec, EmotionTimeline):
        if len(spec) != n_frames:
            raise InvalidInputError(f"emotion timeline has {len(spec)} frames, audio has {n_frames}")
        return spec
    p = Path(str(spec))
    if p.suffix.lower() == ".json" or p.exists():
        segs = json.loads(p.read_text())
        if segs and int(max(s["start_frame"] for s in segs)) >= n_frames:
            raise InvalidInputError(f"emotion timeline starts a segment beyond frame {n_frames - 1}")
        return EmotionTimeline.from_segments(segs, n_frames)
    return EmotionTimeline.constant(parse_class(str(spec)), n_frames)


def evaluate_models(models: Models, clips, cam_index=5, frame_stride=1):
    """Aggregate PSNR/SSIM/LMD of full synthesis against ground-truth clips from one dataset camera."""
    from .metrics import MetricReport, lmd, project_landmarks, psnr, ssim
    rep = MetricReport()
    for c in clips:
        feat = clip_features(c)
        cam = c.cameras[cam_index]
        frames, geom = synthesize(models, feat, c.timeline, [cam] * len(feat))
        for t in range(0, c.n_frames, frame_stride):
            gt = c.image(cam_index, t)
            rep.add(psnr(frames[t].rgb, gt), ssim(frames[t].rgb, gt),
                    lmd(project_landmarks(cam, geom.vertices[t], c.landmarks),
                        project_landmarks(cam, c.geometry.vertices[t], c.landmarks)))
    return rep
