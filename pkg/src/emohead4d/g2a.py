"""Geometry-to-appearance: canonical Gaussians and per-frame dynamic Gaussians.

The canonical head is fitted to multi-view images of one silent frame with a
fixed point count. Each dynamic frame keeps the canonical scales and
opacities and takes its SH coefficients and rotations from two small MLPs
shared over points:

* FeatureNet ``(H_o, e, p, dmu) -> H_t = H_o + f(.)``
* RotationNet ``(R_o, e, p, dmu) -> R_t = normalize(R_o * (1 + g(.)))``

Both output layers start at zero so the untrained model reproduces the
canonical head.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import AdamState, ParamTape, adam_step, init_mlp, mlp_backward, mlp_forward, photometric_loss
from .checkpoint import load_checkpoint, save_checkpoint
from .completion import HeadCompletion, build_completion, carve_otf_points, complete_positions, fuse_clouds
from .core import (Camera, GaussianCloud, InvalidInputError, N_SH, logit, quat_multiply, quat_multiply_backward,
                   quat_normalize)
from .emotion import EMBED_DIM
from .mesh import mesh_upsample, vertex_normals
from .rasterizer import render, render_backward

log = logging.getLogger(__name__)

FEATURE_HIDDEN = 128
FEATURE_LAYERS = 4
ROTATION_HIDDEN = 64
ROTATION_LAYERS = 2
POINT_FIELDS = ("positions", "log_scales", "rotations", "opacity_logits", "sh_coeffs")


# --------------------------------------------------------------------------
# canonical head

def otf_uv(positions, center=(0.0, 0.0, 0.0)):
    """Spherical chart for points without a mesh UV: azimuth and elevation mapped to [0, 1]."""
    d = np.asarray(positions, dtype=np.float64) - np.asarray(center)
    az = np.arctan2(d[:, 0], d[:, 2])
    el = np.arctan2(d[:, 1], np.hypot(d[:, 0], d[:, 2]))
    return np.stack([az / (2 * np.pi) + 0.5, el / np.pi + 0.5], axis=1)


def head_bounds(center=(0.0, -0.02, 0.0), half=(0.10, 0.16, 0.12)):
    c, h = np.asarray(center), np.asarray(half)
    return c - h, c + h


def init_head_cloud(facial_positions, faces, facial_uv, otf_count, bounds, seed=0, facial_opacity=0.9,
                    otf_opacity=0.1):
    """Initial canonical cloud: one Gaussian per facial vertex followed by ``otf_count`` OTF points."""
    from .datagen import frames_to_quats, _vertex_spacing

    fac = np.asarray(facial_positions, dtype=np.float64)
    nrm = vertex_normals(fac, faces)
    sp = _vertex_spacing(fac, faces)
    ls = np.log(np.stack([0.6 * sp, 0.6 * sp, 0.2 * sp], axis=1))
    n_f = len(fac)
    facial = GaussianCloud(fac, ls, frames_to_quats(nrm), np.full(n_f, logit(facial_opacity)),
                           np.zeros((n_f, N_SH)), facial_uv, np.ones(n_f, dtype=bool))
    if otf_count == 0:
        return facial
    pts = carve_otf_points(bounds, otf_count, fac, nrm, seed=seed)
    lo, hi = bounds
    spacing = (np.prod(np.asarray(hi) - np.asarray(lo)) / otf_count) ** (1 / 3)
    otf = GaussianCloud(pts, np.full((len(pts), 3), np.log(0.5 * spacing)), np.tile([1.0, 0, 0, 0], (len(pts), 1)),
                        np.full(len(pts), logit(otf_opacity)), np.zeros((len(pts), N_SH)),
                        otf_uv(pts, 0.5 * (np.asarray(lo) + np.asarray(hi))), np.zeros(len(pts), dtype=bool))
    return GaussianCloud.concat([facial, otf])


@dataclass
class CanonicalConfig:
    iterations: int = 3000
    lr_positions: float = 2e-4
    lr_positions_final: float = 2e-6
    lr_log_scales: float = 5e-3
    lr_rotations: float = 1e-3
    lr_opacity: float = 5e-2
    lr_sh_dc: float = 1e-2
    lr_sh_rest: float = 5e-4
    views_per_step: int = 1
    lam: float = 0.2
    background: tuple = (0.0, 0.0, 0.0)
    freeze_facial_positions: bool = True
    converge_loss: float = 0.05
    seed: int = 0
    log_every: int = 100


@dataclass
class CanonicalHead:
    cloud: GaussianCloud
    cameras: list
    iterations: int
    losses: list = field(default_factory=list)
    status: str = "ok"

    @property
    def n_facial(self):
        return int(self.cloud.is_facial.sum())


def _sh_rest_mask():
    m = np.zeros(N_SH, dtype=bool)
    for c in range(3):
        m[c * 16 + 1:(c + 1) * 16] = True
    return m


def train_canonical(images, cameras, init_cloud: GaussianCloud, config: CanonicalConfig | None = None,
                    callback=None) -> CanonicalHead:
    """Photometric fit of all Gaussian fields with Adam; the point count never changes."""
    cfg = config or CanonicalConfig()
    cameras = list(cameras)
    images = [np.asarray(im, dtype=np.float64) for im in images]
    if len(cameras) < 2 or len(images) != len(cameras):
        raise InvalidInputError("canonical training needs at least two views with one image each")
    cloud = init_cloud.copy()
    if cfg.iterations == 0:
        return CanonicalHead(cloud, cameras, 0, [], "ok")
    rng = np.random.default_rng(cfg.seed)
    tape = ParamTape({f: getattr(cloud, f) for f in POINT_FIELDS})
    lrs = {"positions": cfg.lr_positions, "log_scales": cfg.lr_log_scales, "rotations": cfg.lr_rotations,
           "opacity_logits": cfg.lr_opacity, "sh_coeffs": np.where(_sh_rest_mask(), cfg.lr_sh_rest, cfg.lr_sh_dc)}
    state = AdamState(lr=lrs)
    fac = cloud.is_facial
    losses = []
    queue = []     # views are drawn in shuffled passes over the training set
    for it in range(cfg.iterations):
        for f in POINT_FIELDS:
            setattr(cloud, f, tape.params[f])
        tape.zero_grad()
        total = 0.0
        views = []
        while len(views) < min(cfg.views_per_step, len(cameras)):
            if not queue:
                queue = list(rng.permutation(len(cameras)))
            views.append(queue.pop())
        for v in views:
            frame = render(cloud, cameras[v], cfg.background, keep_state=True)
            loss, g_img = photometric_loss(frame, images[v], cfg.lam)
            total += loss / len(views)
            g = render_backward(cloud, cameras[v], cfg.background, g_img / len(views), frame)
            for f in POINT_FIELDS:
                tape.accumulate(f, getattr(g, f))
        if cfg.freeze_facial_positions:
            tape.grads["positions"][fac] = 0.0
        losses.append(total)
        frac = it / max(1, cfg.iterations - 1)
        state.lr["positions"] = cfg.lr_positions * (cfg.lr_positions_final / cfg.lr_positions) ** frac
        adam_step(tape, state)
        tape.params["rotations"][...] = quat_normalize(tape.params["rotations"])
        if callback is not None:
            callback(it, total)
        if cfg.log_every and it % cfg.log_every == 0:
            log.info("canonical iter %d loss %.4f", it, total)
    for f in POINT_FIELDS:
        setattr(cloud, f, tape.params[f].copy())
    tail = float(np.mean(losses[-max(1, len(losses) // 20):]))
    status = "ok" if tail <= cfg.converge_loss else "not_converged"
    if status != "ok":
        log.warning("canonical fit did not reach loss %.3g (final %.3g)", cfg.converge_loss, tail)
    return CanonicalHead(cloud, cameras, cfg.iterations, losses, status)


def save_canonical(path, head: CanonicalHead, extra_meta=None):
    c = head.cloud
    tensors = {f"cloud/{f}": getattr(c, f) for f in POINT_FIELDS}
    tensors["cloud/uv"] = c.uv
    tensors["cloud/is_facial"] = c.is_facial.astype(np.float64)
    tensors["canonical/losses"] = np.asarray(head.losses, dtype=np.float64)
    meta = {"kind": "canonical", "iterations": head.iterations, "status": head.status,
            "cameras": [cam.to_dict() for cam in head.cameras], **(extra_meta or {})}
    save_checkpoint(path, tensors, meta)


def load_canonical(path):
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "canonical":
        raise InvalidInputError(f"{path} is not a canonical checkpoint")
    cloud = GaussianCloud(*(tensors[f"cloud/{f}"] for f in POINT_FIELDS), uv=tensors["cloud/uv"],
                          is_facial=tensors["cloud/is_facial"] > 0.5)
    cloud.rotations = quat_normalize(cloud.rotations)
    head = CanonicalHead(cloud, [Camera.from_dict(d) for d in meta["cameras"]], meta["iterations"],
                         list(tensors.get("canonical/losses", [])), meta.get("status", "ok"))
    return head, meta


# --------------------------------------------------------------------------
# dynamic networks

def compute_delta_mu(mu_t, mu_o):
    """``(mu_t - mu_o)`` with its mean over points removed."""
    mu_t = np.asarray(mu_t, dtype=np.float64)
    mu_o = np.asarray(mu_o, dtype=np.float64)
    if mu_t.shape != mu_o.shape or mu_t.ndim != 2 or mu_t.shape[1] != 3:
        raise InvalidInputError(f"point sets {mu_t.shape} and {mu_o.shape} do not match")
    d = mu_t - mu_o
    return d - d.mean(axis=0)


@dataclass
class G2AConfig:
    iterations: int = 2000
    lr: float = 1e-3
    lr_final: float = 1e-4
    no_featurenet: bool = False
    delta_scale: float = 100.0       # metres -> network input units
    lam: float = 0.2
    background: tuple = (0.0, 0.0, 0.0)
    seed: int = 0
    log_every: int = 100


def feature_net_input_dim():
    return N_SH + EMBED_DIM + 2 + 3


def rotation_net_input_dim():
    return 4 + EMBED_DIM + 2 + 3


def init_g2a(rng, no_featurenet=False):
    """Network weights as a flat dict; output layers are zero."""
    w = {}
    if not no_featurenet:
        sizes = [feature_net_input_dim()] + [FEATURE_HIDDEN] * (FEATURE_LAYERS - 1) + [N_SH]
        for i, (W, b) in enumerate(init_mlp(rng, sizes, zero_last=True)):
            w[f"featurenet/{i}/W"], w[f"featurenet/{i}/b"] = W, b
    sizes = [rotation_net_input_dim()] + [ROTATION_HIDDEN] * (ROTATION_LAYERS - 1) + [4]
    for i, (W, b) in enumerate(init_mlp(rng, sizes, zero_last=True)):
        w[f"rotationnet/{i}/W"], w[f"rotationnet/{i}/b"] = W, b
    return w


def zero_g2a(no_featurenet=False):
    return {k: np.zeros_like(v) for k, v in init_g2a(np.random.default_rng(0), no_featurenet).items()}


def _layers(w, prefix):
    n = sum(1 for k in w if k.startswith(prefix + "/") and k.endswith("/W"))
    return [(w[f"{prefix}/{i}/W"], w[f"{prefix}/{i}/b"]) for i in range(n)]


def has_featurenet(w):
    return any(k.startswith("featurenet/") for k in w)


def _check(x, n, what):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != n:
        raise InvalidInputError(f"{what} must be (N, {n}), got {x.shape}")
    return x


def _cond(e, p, dmu, n):
    e = np.broadcast_to(np.asarray(e, dtype=np.float64), (n, EMBED_DIM))
    return np.concatenate([e, _check(p, 2, "p"), _check(dmu, 3, "delta_mu")], axis=1)


def feature_net(H_o, e, p, dmu, weights):
    """``H_t`` per point, ``(N, 48)``; identity when no FeatureNet tensors are present."""
    H_o = _check(H_o, N_SH, "H_o")
    if not has_featurenet(weights):
        return H_o.copy()
    out, _ = mlp_forward(_layers(weights, "featurenet"), np.concatenate([H_o, _cond(e, p, dmu, len(H_o))], 1))
    return H_o + out


def _rotation_forward(R_o, e, p, dmu, weights):
    R_o = _check(R_o, 4, "R_o")
    x = np.concatenate([R_o, _cond(e, p, dmu, len(R_o))], 1)
    out, acts = mlp_forward(_layers(weights, "rotationnet"), x)
    res = out + np.array([1.0, 0.0, 0.0, 0.0])
    u = quat_multiply(R_o, res)
    return u, (acts, res)


def rotation_net(R_o, e, p, dmu, weights):
    """Unit quaternions ``(N, 4)``."""
    u, _ = _rotation_forward(R_o, e, p, dmu, weights)
    return quat_normalize(u)


def rotation_net_backward(R_o, e, p, dmu, weights, grad_R_t):
    """Gradient of ``sum(grad_R_t * R_t)`` w.r.t. the RotationNet weights (and its input)."""
    u, (acts, res) = _rotation_forward(R_o, e, p, dmu, weights)
    n = np.linalg.norm(u, axis=1, keepdims=True)
    q = u / n
    g_u = (grad_R_t - q * np.sum(q * grad_R_t, axis=1, keepdims=True)) / n
    _, g_res = quat_multiply_backward(R_o, res, g_u)
    grads, g_in = mlp_backward(_layers(weights, "rotationnet"), acts, g_res)
    return {f"rotationnet/{i}/{k}": v for i, gw in enumerate(grads) for k, v in zip("Wb", gw)}, g_in


def feature_net_backward(H_o, e, p, dmu, weights, grad_H_t):
    x = np.concatenate([_check(H_o, N_SH, "H_o"), _cond(e, p, dmu, len(H_o))], 1)
    _, acts = mlp_forward(_layers(weights, "featurenet"), x)
    grads, g_in = mlp_backward(_layers(weights, "featurenet"), acts, grad_H_t)
    return {f"featurenet/{i}/{k}": v for i, gw in enumerate(grads) for k, v in zip("Wb", gw)}, g_in


@dataclass
class DynamicFrame:
    cloud: GaussianCloud
    delta_mu: np.ndarray


def _point_delta(canonical: GaussianCloud, mu_t):
    d = mu_t - canonical.positions
    return d - d[canonical.is_facial].mean(axis=0)


def assemble_dynamic_frame(canonical: CanonicalHead | GaussianCloud, mu_t, e, weights, delta_scale=100.0
                           ) -> DynamicFrame:
    """``G_t = {mu_t, S_o, R_t, alpha_o, H_t}``; ``mu_t`` must cover every point."""
    base = canonical.cloud if isinstance(canonical, CanonicalHead) else canonical
    mu_t = np.asarray(mu_t, dtype=np.float64)
    if mu_t.shape != base.positions.shape:
        raise InvalidInputError(f"mu_t has shape {mu_t.shape}; expected {base.positions.shape} (facial + OTF)")
    dmu = _point_delta(base, mu_t)
    x_d = dmu * delta_scale
    out = GaussianCloud(mu_t.copy(), base.log_scales, rotation_net(base.rotations, e, base.uv, x_d, weights),
                        base.opacity_logits, feature_net(base.sh_coeffs, e, base.uv, x_d, weights),
                        base.uv, base.is_facial, base.opacity_weight)
    return DynamicFrame(out, dmu)


def frame_positions(canonical: CanonicalHead, completion: HeadCompletion, facial_t):
    """Complete per-frame positions from facial positions at time ``t``."""
    base = canonical.cloud
    mu_o_f = base.positions[base.is_facial]
    delta = np.asarray(facial_t) - mu_o_f
    return complete_positions(completion, base.positions, facial_t, delta)


def render_frame(canonical: CanonicalHead, completion: HeadCompletion, facial_t, e, weights, cam,
                 background=(0.0, 0.0, 0.0), delta_scale=100.0, keep_state=False):
    """Fused canonical + dynamic rendering of one frame. Returns ``(frame, fused_cloud, dynamic)``."""
    mu_t = frame_positions(canonical, completion, facial_t)
    dyn = assemble_dynamic_frame(canonical, mu_t, e, weights, delta_scale)
    fused = fuse_clouds(canonical.cloud, dyn.cloud, completion.mask)
    return render(fused, cam, background, keep_state=keep_state), fused, dyn


@dataclass
class DynamicSample:
    """One training frame: facial positions, emotion vector, and its multi-view images."""
    facial: np.ndarray          # (N_f, 3)
    embedding: np.ndarray       # (E,)
    images: list                # per camera (H, W, 3)
    cameras: list


def train_dynamic(samples, canonical: CanonicalHead, config: G2AConfig | None = None, completion=None,
                  unit_scale_mm=1000.0, callback=None):
    """Fit FeatureNet and RotationNet; the canonical head stays frozen.

    Each step draws one (frame, camera) pair uniformly. Returns
    ``(weights, losses)``.
    """
    cfg = config or G2AConfig()
    samples = list(samples)
    if not samples:
        from .s2g import ConfigurationError
        raise ConfigurationError("dynamic training needs at least one frame")
    comp = completion or build_completion(canonical.cloud, unit_scale_mm)
    rng = np.random.default_rng(cfg.seed)
    tape = ParamTape(init_g2a(rng, cfg.no_featurenet))
    state = AdamState(lr=cfg.lr)
    base = canonical.cloud
    N = len(base)
    losses = []
    for it in range(cfg.iterations):
        s = samples[rng.integers(len(samples))]
        v = int(rng.integers(len(s.cameras)))
        w = tape.params
        frame, fused, dyn = render_frame(canonical, comp, s.facial, s.embedding, w, s.cameras[v],
                                         cfg.background, cfg.delta_scale, keep_state=True)
        loss, g_img = photometric_loss(frame, s.images[v], cfg.lam)
        g = render_backward(fused, s.cameras[v], cfg.background, g_img, frame)
        tape.zero_grad()
        x_d = dyn.delta_mu * cfg.delta_scale
        gr, _ = rotation_net_backward(base.rotations, s.embedding, base.uv, x_d, w, g.rotations[N:])
        for k, val in gr.items():
            tape.accumulate(k, val)
        if not cfg.no_featurenet:
            gf, _ = feature_net_backward(base.sh_coeffs, s.embedding, base.uv, x_d, w, g.sh_coeffs[N:])
            for k, val in gf.items():
                tape.accumulate(k, val)
        losses.append(loss)
        frac = it / max(1, cfg.iterations - 1)
        adam_step(tape, state, lr_scale=(cfg.lr_final / cfg.lr) ** frac)
        if callback is not None:
            callback(it, loss)
        if cfg.log_every and it % cfg.log_every == 0:
            log.info("dynamic iter %d loss %.4f", it, loss)
    return {k: v.copy() for k, v in tape.params.items()}, losses


def save_g2a(path, weights, config: G2AConfig, embed, extra_meta=None):
    tensors = dict(weights)
    tensors["embed"] = embed
    save_checkpoint(path, tensors, {"kind": "g2a", "config": asdict(config), **(extra_meta or {})})


def load_g2a(path):
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "g2a":
        raise InvalidInputError(f"{path} is not a dynamic checkpoint")
    embed = tensors.pop("embed")
    cfg = G2AConfig(**{k: tuple(v) if isinstance(v, list) else v
                       for k, v in meta.get("config", {}).items() if k in G2AConfig.__dataclass_fields__})
    return tensors, embed, cfg, meta


def facial_points_from_geometry(vertices, faces, levels=1):
    """Facial point positions of a frame: the upsampled mesh vertices."""
    v, _, _ = mesh_upsample(vertices, faces, levels)
    return v
