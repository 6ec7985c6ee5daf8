"""Speech-to-geometry: audio features + emotion labels -> vertex displacements.

A single-layer GRU reads ``concat(normalised log-mel, emotion embedding)``
per frame; a linear head maps each hidden state to a ``V x 3`` displacement
of the mean template. The 4x midpoint upsampling is a fixed post-process.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .audio import N_MELS, AudioFeatures
from .autodiff import AdamState, ParamTape, adam_step, gru_backward, gru_forward, init_gru
from .checkpoint import load_checkpoint, save_checkpoint
from .core import InvalidInputError
from .emotion import EMBED_DIM, N_CLASSES, EmotionTimeline
from .geometry import GeometrySequence
from .mesh import TemplateMesh, mesh_upsample

log = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    pass


@dataclass
class S2GConfig:
    hidden: int = 256
    iterations: int = 2500
    lr: float = 4e-3
    lr_final: float = 1e-4
    seed: int = 0
    no_emotion: bool = False
    log_every: int = 100


TRAINABLE = ("embed", "gru/Wx", "gru/Wh", "gru/bx", "gru/bh", "head/W", "head/b")


def zero_weights(n_vertices, hidden=256, feat_dim=N_MELS):
    """All-zero parameter set; its prediction is the template at every frame."""
    return {
        "embed": np.zeros((N_CLASSES, EMBED_DIM)),
        "gru/Wx": np.zeros((feat_dim + EMBED_DIM, 3 * hidden)),
        "gru/Wh": np.zeros((hidden, 3 * hidden)),
        "gru/bx": np.zeros(3 * hidden),
        "gru/bh": np.zeros(3 * hidden),
        "head/W": np.zeros((hidden, 3 * n_vertices)),
        "head/b": np.zeros(3 * n_vertices),
        "feat_mean": np.zeros(feat_dim),
        "feat_std": np.ones(feat_dim),
        "disp_scale": np.ones(1),
    }


def init_weights(rng, n_vertices, hidden=256, feat_dim=N_MELS):
    w = zero_weights(n_vertices, hidden, feat_dim)
    g = init_gru(rng, feat_dim + EMBED_DIM, hidden)
    w.update({f"gru/{k}": v for k, v in g.items()})
    w["embed"] = rng.normal(0.0, 1.0, (N_CLASSES, EMBED_DIM))
    bound = 1.0 / np.sqrt(hidden)
    w["head/W"] = rng.uniform(-bound, bound, (hidden, 3 * n_vertices))
    return w


def _gru(w):
    return {k: w[f"gru/{k}"] for k in ("Wx", "Wh", "bx", "bh")}


def _forward(w, feats, labels, no_emotion):
    """Batched forward: ``feats (B, T, D)``, ``labels (B, T)`` -> displacement ``(B, T, V, 3)``."""
    x = (feats - w["feat_mean"]) / w["feat_std"]
    e = w["embed"][labels]
    if no_emotion:
        e = np.zeros_like(e)
    inp = np.concatenate([x, e], axis=2)
    hs, gcache = gru_forward(_gru(w), inp)
    out = hs @ w["head/W"] + w["head/b"]
    B, T = labels.shape
    disp = (out * w["disp_scale"][0]).reshape(B, T, -1, 3)
    return disp, (hs, gcache, labels)


def _backward(w, cache, g_disp, no_emotion):
    hs, gcache, labels = cache
    B, T = labels.shape
    g_out = g_disp.reshape(B, T, -1) * w["disp_scale"][0]
    grads = {
        "head/W": hs.reshape(-1, hs.shape[-1]).T @ g_out.reshape(-1, g_out.shape[-1]),
        "head/b": g_out.sum(axis=(0, 1)),
    }
    g_hs = g_out @ w["head/W"].T
    gg, g_inp = gru_backward(_gru(w), gcache, g_hs)
    grads.update({f"gru/{k}": v for k, v in gg.items()})
    g_embed = np.zeros_like(w["embed"])
    if not no_emotion:
        np.add.at(g_embed, labels.reshape(-1), g_inp[..., N_MELS:].reshape(-1, EMBED_DIM))
    grads["embed"] = g_embed
    return grads


def s2g_forward(feat: AudioFeatures, emotions: EmotionTimeline, template: TemplateMesh, weights,
                no_emotion: bool = False) -> GeometrySequence:
    """Per-frame template-resolution vertices ``(T, V, 3)`` for one clip."""
    frames = np.asarray(getattr(feat, "frames", feat), dtype=np.float64)
    labels = np.asarray(getattr(emotions, "labels", emotions), dtype=np.int64)
    if len(frames) != len(labels):
        raise InvalidInputError(f"{len(frames)} feature rows vs {len(labels)} emotion labels")
    if weights["head/W"].shape[1] != 3 * template.n_vertices:
        raise InvalidInputError("weights were trained for a different template size")
    disp, _ = _forward(weights, frames[None], labels[None], no_emotion)
    fps = getattr(feat, "fps", 25.0)
    return GeometrySequence(template.vertices[None] + disp[0], fps)


def predict_batch(weights, template: TemplateMesh, feats, labels, no_emotion=False):
    """Vertices for several equal-length clips at once, ``(B, T, V, 3)``."""
    disp, _ = _forward(weights, np.asarray(feats), np.asarray(labels), no_emotion)
    return template.vertices[None, None] + disp


def upsample_sequence(seq: GeometrySequence, template: TemplateMesh, levels: int = 1) -> GeometrySequence:
    v, _, _ = mesh_upsample(seq.vertices, template.faces, levels)
    return GeometrySequence(v, seq.fps)


# --------------------------------------------------------------------------
# training

@dataclass
class S2GClip:
    features: np.ndarray       # (T, D)
    labels: np.ndarray         # (T,)
    vertices: np.ndarray       # (T, V, 3) ground truth, template resolution


def per_vertex_rmse(pred, gt):
    return float(np.sqrt(np.mean(np.sum((np.asarray(pred) - np.asarray(gt)) ** 2, axis=-1))))


def _groups(clips):
    by_len = {}
    for c in clips:
        by_len.setdefault(len(c.labels), []).append(c)
    return [by_len[k] for k in sorted(by_len)]


def train_s2g(clips, template: TemplateMesh, config: S2GConfig | None = None):
    """Fit the GRU regressor with Adam; returns ``(weights, losses)``.

    The loss is the mean squared per-vertex distance over all frames of all
    clips (full batch). Deterministic given ``config.seed``.
    """
    cfg = config or S2GConfig()
    clips = list(clips)
    if not clips:
        raise ConfigurationError("S2G training needs at least one clip")
    rng = np.random.default_rng(cfg.seed)
    V = template.n_vertices
    w = init_weights(rng, V, cfg.hidden)
    allf = np.concatenate([c.features for c in clips])
    w["feat_mean"] = allf.mean(axis=0)
    w["feat_std"] = np.maximum(allf.std(axis=0), 1e-3)
    disp = np.concatenate([c.vertices - template.vertices[None] for c in clips])
    w["disp_scale"] = np.array([max(float(disp.std()), 1e-6)])

    tape = ParamTape({k: w[k] for k in TRAINABLE})
    state = AdamState(lr=cfg.lr)
    groups = [(np.stack([c.features for c in g]), np.stack([c.labels for c in g]),
               np.stack([c.vertices for c in g])) for g in _groups(clips)]
    n_total = sum(lab.size for _, lab, _ in groups) * V
    losses = []
    for it in range(cfg.iterations):
        w.update(tape.params)
        tape.zero_grad()
        total = 0.0
        for feats, labels, gt in groups:
            d, cache = _forward(w, feats, labels, cfg.no_emotion)
            err = template.vertices[None, None] + d - gt
            total += float(np.sum(err ** 2))
            grads = _backward(w, cache, 2.0 * err / n_total, cfg.no_emotion)
            for k, g in grads.items():
                tape.accumulate(k, g)
        losses.append(total / n_total)
        frac = it / max(1, cfg.iterations - 1)
        scale = (cfg.lr_final / cfg.lr) ** frac
        adam_step(tape, state, lr_scale=scale)
        if cfg.log_every and it % cfg.log_every == 0:
            log.info("s2g epoch %d loss %.4e", it, losses[-1])
    w.update(tape.params)
    return w, losses


def save_s2g(path, weights, template: TemplateMesh, config: S2GConfig, extra_meta=None):
    tensors = dict(weights)
    tensors["template/vertices"] = template.vertices
    tensors["template/faces"] = template.faces.astype(np.float64)
    tensors["template/uv"] = template.uv
    tensors["template/landmarks"] = template.landmarks.astype(np.float64)
    meta = {"kind": "s2g", "config": asdict(config), **(extra_meta or {})}
    save_checkpoint(path, tensors, meta)


def load_s2g(path):
    tensors, meta = load_checkpoint(path)
    template = TemplateMesh(tensors.pop("template/vertices"), tensors.pop("template/faces").astype(np.int64),
                            tensors.pop("template/uv"), tensors.pop("template/landmarks").astype(np.int64))
    cfg = S2GConfig(**{k: v for k, v in meta.get("config", {}).items() if k in S2GConfig.__dataclass_fields__})
    return tensors, template, cfg, meta
