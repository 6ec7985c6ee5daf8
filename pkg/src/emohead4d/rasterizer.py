"""Differentiable tile-based Gaussian splatting on the CPU.

Forward: project every Gaussian to a 2D splat, bin splats into 16x16 tiles,
sort front-to-back by (depth, index), alpha-composite per pixel. Backward:
analytic gradients to positions, log-scales, quaternions, opacity logits and
SH coefficients.

A splat's support is the ellipse ``power <= MAX_POWER`` (7 standard
deviations); both the tiled path and the dense oracle use it, so they agree up
to the early-termination residual, which is bounded by ``T_MIN``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .core import (
    MIN_LOG_SCALE,
    N_SH_BASIS,
    Camera,
    GaussianCloud,
    InvalidInputError,
    build_covariance,
    quat_to_rotmat,
    quat_to_rotmat_backward,
    sh_basis,
    sh_basis_jacobian,
    sigmoid,
)

TILE = _kernels.TILE
NEAR = 0.01
LOWPASS = 0.3
MAX_POWER = 24.5
ALPHA_MAX = 0.99
T_MIN = 1e-6

if "EMOHEAD4D_THREADS" in os.environ:
    _kernels.set_threads(os.environ["EMOHEAD4D_THREADS"])


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    rgb: np.ndarray
    alpha: float


@dataclass
class RenderedFrame:
    rgb: np.ndarray
    alpha: np.ndarray
    state: object = field(default=None, repr=False, compare=False)


@dataclass
class _Projection:
    """Projected splats (compacted to the visible subset) plus backward cache."""

    index: np.ndarray          # cloud index of each visible splat
    mean2d: np.ndarray
    conic: np.ndarray          # (A, B, C) of the inverse 2D covariance
    cov2d: np.ndarray
    depth: np.ndarray
    rgb: np.ndarray
    raw: np.ndarray
    opacity: np.ndarray
    rect: np.ndarray           # (jmin, jmax, imin, imax) pixel bounds of the support
    cache: dict


def _background(background):
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64).reshape(3)
    return bg


def _project(cloud: GaussianCloud, cam: Camera) -> _Projection:
    n = len(cloud)
    Rc, tc = cam.rotation, cam.translation
    p = cloud.positions @ Rc.T + tc if n else np.zeros((0, 3))
    opac_all = cloud.opacities if n else np.zeros(0)
    keep = np.nonzero((p[:, 2] > NEAR) & (opac_all > 0.0))[0]

    mu = cloud.positions[keep]
    pc = p[keep]
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    u = cam.fx * x / z + cam.cx
    v = cam.fy * y / z + cam.cy
    m = len(keep)
    J = np.zeros((m, 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * x / (z * z)
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * y / (z * z)
    Tm = J @ Rc
    q = cloud.rotations[keep]
    ls = cloud.log_scales[keep]
    Sigma = build_covariance(ls, q)
    cov = Tm @ Sigma @ np.swapaxes(Tm, 1, 2)
    cov[:, 0, 0] += LOWPASS
    cov[:, 1, 1] += LOWPASS
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)

    rx = np.sqrt(2.0 * MAX_POWER * a)
    ry = np.sqrt(2.0 * MAX_POWER * c)
    jmin = np.maximum(np.ceil(u - rx - 0.5), 0)
    jmax = np.minimum(np.floor(u + rx - 0.5), cam.width - 1)
    imin = np.maximum(np.ceil(v - ry - 0.5), 0)
    imax = np.minimum(np.floor(v + ry - 0.5), cam.height - 1)
    on = (jmin <= jmax) & (imin <= imax)

    sel = np.nonzero(on)[0]
    keep, mu, pc, J, Tm, q, ls, Sigma = keep[sel], mu[sel], pc[sel], J[sel], Tm[sel], q[sel], ls[sel], Sigma[sel]
    cov, conic = cov[sel], conic[sel]
    u, v = u[sel], v[sel]
    rect = np.stack([jmin[sel], jmax[sel], imin[sel], imax[sel]], axis=1).astype(np.int64)

    view = mu - cam.center
    vnorm = np.linalg.norm(view, axis=1)
    dirs = view / vnorm[:, None]
    basis = sh_basis(dirs)
    Hc = cloud.sh_coeffs[keep].reshape(-1, 3, N_SH_BASIS)
    raw = np.einsum("nck,nk->nc", Hc, basis)
    rgb = np.clip(raw + 0.5, 0.0, 1.0)
    opacity = opac_all[keep]
    cache = dict(pc=pc, J=J, Tm=Tm, q=q, ls=ls, Sigma=Sigma, dirs=dirs, vnorm=vnorm, basis=basis, Hc=Hc)
    return _Projection(keep, np.stack([u, v], axis=1), conic, cov, pc[:, 2], rgb, raw, opacity, rect, cache)


def project_gaussian(index: int, cloud: GaussianCloud, cam: Camera):
    """Project one Gaussian; returns a :class:`Splat2D` or ``None`` if culled."""
    sub = GaussianCloud(
        cloud.positions[index:index + 1], cloud.log_scales[index:index + 1],
        cloud.rotations[index:index + 1], cloud.opacity_logits[index:index + 1],
        cloud.sh_coeffs[index:index + 1],
        opacity_weight=None if cloud.opacity_weight is None else cloud.opacity_weight[index:index + 1])
    pr = _project(sub, cam)
    if len(pr.index) == 0:
        return None
    return Splat2D(pr.mean2d[0], pr.cov2d[0], float(pr.depth[0]), pr.rgb[0], float(pr.opacity[0]))


@dataclass
class _Binning:
    offsets: np.ndarray
    ids: np.ndarray
    tiles_x: int


def _bin(pr: _Projection, cam: Camera) -> _Binning:
    tiles_x = -(-cam.width // TILE)
    tiles_y = -(-cam.height // TILE)
    n_tiles = tiles_x * tiles_y
    m = len(pr.index)
    if m == 0:
        return _Binning(np.zeros(n_tiles + 1, dtype=np.int64), np.zeros(0, dtype=np.int64), tiles_x)
    order = np.lexsort((pr.index, pr.depth))
    r = pr.rect[order]
    tx0, tx1 = r[:, 0] // TILE, r[:, 1] // TILE
    ty0, ty1 = r[:, 2] // TILE, r[:, 3] // TILE
    wx = tx1 - tx0 + 1
    counts = wx * (ty1 - ty0 + 1)
    total = int(counts.sum())
    starts = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(total) - starts
    rep = np.repeat(np.arange(m), counts)
    tile = (ty0[rep] + local // wx[rep]) * tiles_x + tx0[rep] + local % wx[rep]
    perm = np.argsort(tile, kind="stable")
    ids = order[rep[perm]]
    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    offsets[1:] = np.cumsum(np.bincount(tile, minlength=n_tiles))
    return _Binning(offsets, ids.astype(np.int64), tiles_x)


@dataclass
class _State:
    pr: _Projection
    bins: _Binning
    final_T: np.ndarray
    n_contrib: np.ndarray
    bg: np.ndarray


def render(cloud: GaussianCloud, cam: Camera, background=None, keep_state: bool = False) -> RenderedFrame:
    """Alpha-composite ``cloud`` as seen from ``cam``.

    With ``keep_state`` the projection and per-pixel transmittance are kept on
    the returned frame so :func:`render_backward` does not redo them.
    """
    bg = _background(background)
    pr = _project(cloud, cam)
    bins = _bin(pr, cam)
    H, W = cam.height, cam.width
    rgb = np.empty((H, W, 3))
    T = np.empty((H, W))
    n = np.empty((H, W), dtype=np.int64)
    _kernels.forward_tiles(bins.offsets, bins.ids, pr.mean2d, pr.conic, pr.opacity, pr.rgb, bg,
                           W, H, bins.tiles_x, MAX_POWER, ALPHA_MAX, T_MIN, rgb, T, n)
    state = _State(pr, bins, T, n, bg) if keep_state else None
    return RenderedFrame(rgb, 1.0 - T, state)


def render_oracle(cloud: GaussianCloud, cam: Camera, background=None) -> RenderedFrame:
    """Dense reference renderer: every splat at every pixel, no tiling, no early stop."""
    bg = _background(background)
    pr = _project(cloud, cam)
    H, W = cam.height, cam.width
    if len(pr.index) == 0:
        return RenderedFrame(np.broadcast_to(bg, (H, W, 3)).copy(), np.zeros((H, W)))
    order = np.lexsort((pr.index, pr.depth))
    jj, ii = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    pix = np.stack([jj.ravel(), ii.ravel()], axis=1)
    d = pix[None, :, :] - pr.mean2d[order][:, None, :]
    A, B, C = (pr.conic[order, k][:, None] for k in range(3))
    power = 0.5 * (A * d[..., 0] ** 2 + C * d[..., 1] ** 2) + B * d[..., 0] * d[..., 1]
    alpha = np.minimum(ALPHA_MAX, pr.opacity[order][:, None] * np.exp(-power))
    alpha = np.where(power > MAX_POWER, 0.0, alpha)
    T_excl = np.cumprod(np.vstack([np.ones((1, alpha.shape[1])), 1.0 - alpha[:-1]]), axis=0)
    w = alpha * T_excl
    color = w.T @ pr.rgb[order]
    T_final = T_excl[-1] * (1.0 - alpha[-1])
    color += T_final[:, None] * bg
    return RenderedFrame(color.reshape(H, W, 3), (1.0 - T_final).reshape(H, W))


@dataclass
class CloudGrad:
    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray

    def as_dict(self):
        return dict(positions=self.positions, log_scales=self.log_scales, rotations=self.rotations,
                    opacity_logits=self.opacity_logits, sh_coeffs=self.sh_coeffs)


def render_backward(cloud: GaussianCloud, cam: Camera, background, loss_grad, frame: RenderedFrame | None = None
                    ) -> CloudGrad:
    """Gradients of ``sum(loss_grad * rgb)`` w.r.t. every cloud parameter."""
    loss_grad = np.asarray(loss_grad, dtype=np.float64)
    if loss_grad.shape != (cam.height, cam.width, 3):
        raise InvalidInputError(f"loss_grad shape {loss_grad.shape} != {(cam.height, cam.width, 3)}")
    if frame is None or frame.state is None:
        frame = render(cloud, cam, background, keep_state=True)
    st: _State = frame.state
    pr, bins = st.pr, st.bins
    pair_grad = np.zeros((len(bins.ids), 9))
    _kernels.backward_tiles(bins.offsets, bins.ids, pr.mean2d, pr.conic, pr.opacity, pr.rgb, st.bg,
                            cam.width, cam.height, bins.tiles_x, MAX_POWER, ALPHA_MAX,
                            st.final_T, st.n_contrib, np.ascontiguousarray(loss_grad), pair_grad)
    g = np.zeros((len(pr.index), 9))
    np.add.at(g, bins.ids, pair_grad)
    return _projection_backward(cloud, cam, pr, g)


def _projection_backward(cloud, cam, pr: _Projection, g) -> CloudGrad:
    n = len(cloud)
    out = CloudGrad(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n), np.zeros((n, 3 * N_SH_BASIS)))
    if len(pr.index) == 0:
        return out
    c = pr.cache
    idx = pr.index
    Rc = cam.rotation

    # colour -> SH coefficients and view direction
    g_raw = g[:, 0:3] * ((pr.raw + 0.5 > 0.0) & (pr.raw + 0.5 < 1.0))
    out.sh_coeffs[idx] = (g_raw[:, :, None] * c["basis"][:, None, :]).reshape(-1, 3 * N_SH_BASIS)
    g_dir = np.einsum("nc,nck,nkj->nj", g_raw, c["Hc"], sh_basis_jacobian(c["dirs"]))
    dirs = c["dirs"]
    g_view = (g_dir - dirs * np.sum(dirs * g_dir, axis=1, keepdims=True)) / c["vnorm"][:, None]

    # opacity
    wgt = np.ones(n) if cloud.opacity_weight is None else cloud.opacity_weight
    s = sigmoid(cloud.opacity_logits[idx])
    out.opacity_logits[idx] = g[:, 3] * wgt[idx] * s * (1.0 - s)

    # conic -> 2D covariance -> 3D covariance and Jacobian
    A, B, C = pr.conic[:, 0], pr.conic[:, 1], pr.conic[:, 2]
    Q = np.stack([np.stack([A, B], 1), np.stack([B, C], 1)], 1)
    GQ = np.stack([np.stack([g[:, 6], 0.5 * g[:, 7]], 1), np.stack([0.5 * g[:, 7], g[:, 8]], 1)], 1)
    GM = -Q @ GQ @ Q
    Tm, Sigma = c["Tm"], c["Sigma"]
    G_Sigma = np.swapaxes(Tm, 1, 2) @ GM @ Tm
    G_T = 2.0 * GM @ Tm @ Sigma
    G_J = G_T @ Rc.T

    pc = c["pc"]
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    fx, fy = cam.fx, cam.fy
    gu, gv = g[:, 4], g[:, 5]
    gx = gu * fx / z - G_J[:, 0, 2] * fx / z ** 2
    gy = gv * fy / z - G_J[:, 1, 2] * fy / z ** 2
    gz = (-gu * fx * x / z ** 2 - gv * fy * y / z ** 2
          - G_J[:, 0, 0] * fx / z ** 2 + G_J[:, 0, 2] * 2 * fx * x / z ** 3
          - G_J[:, 1, 1] * fy / z ** 2 + G_J[:, 1, 2] * 2 * fy * y / z ** 3)
    out.positions[idx] = np.stack([gx, gy, gz], axis=1) @ Rc + g_view

    # Sigma = R diag(s^2) R^T
    ls, q = c["ls"], c["q"]
    s2 = np.exp(2.0 * np.maximum(ls, MIN_LOG_SCALE))
    Rg = quat_to_rotmat(q)
    G_R = 2.0 * G_Sigma @ (Rg * s2[:, None, :])
    out.rotations[idx] = quat_to_rotmat_backward(q, G_R)
    diag = np.einsum("nji,njk,nki->ni", Rg, G_Sigma, Rg)
    out.log_scales[idx] = 2.0 * s2 * diag * (ls > MIN_LOG_SCALE)
    return out


# --------------------------------------------------------------------------
# export

def to_uint8(rgb):
    return np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(frame: RenderedFrame, path, alpha_path=None):
    """Write rgb as 8-bit PNG and, optionally, alpha as 16-bit grayscale PNG."""
    from PIL import Image

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(frame.rgb), mode="RGB").save(path, optimize=False)
    if alpha_path is not None:
        a16 = np.round(np.clip(frame.alpha, 0.0, 1.0) * 65535.0).astype(np.uint16)
        Image.fromarray(a16).save(alpha_path)


def load_png(path):
    """Read an 8-bit RGB PNG as float ``(H, W, 3)`` in [0, 1]."""
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def load_alpha_png(path):
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / 65535.0
