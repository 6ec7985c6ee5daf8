"""Gaussian, rotation and spherical-harmonic math shared by the whole package.

Conventions
-----------
* Quaternions are stored ``(w, x, y, z)``.
* Scales are stored as logs, opacities as logits.
* SH coefficients are channel-major: ``H[c * 16 + k]`` is basis ``k`` of
  channel ``c``, with the basis ordered by (degree, order) ascending.
* Display colour is ``clip(raw + 0.5, 0, 1)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)

N_SH_BASIS = 16
N_SH = 3 * N_SH_BASIS
MIN_LOG_SCALE = float(np.log(1e-6))


class InvalidInputError(ValueError):
    """Raised when an argument violates an operation's precondition."""


class DegenerateCovarianceError(InvalidInputError):
    pass


# --------------------------------------------------------------------------
# quaternions

def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0.0):
        raise InvalidInputError("zero-norm quaternion")
    return q / n


def quat_to_rotmat(q):
    """Rotation matrix of a (batch of) quaternion(s), renormalised first.

    Works on shape ``(4,)`` or ``(N, 4)``; returns ``(3, 3)`` or ``(N, 3, 3)``.
    """
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rotmat_backward(q, grad_R):
    """Chain ``dL/dR`` back to the *unnormalised* quaternion."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    G = grad_R
    g = np.empty_like(qn)
    g[..., 0] = 2 * (-z * G[..., 0, 1] + y * G[..., 0, 2] + z * G[..., 1, 0]
                     - x * G[..., 1, 2] - y * G[..., 2, 0] + x * G[..., 2, 1])
    g[..., 1] = 2 * (y * G[..., 0, 1] + z * G[..., 0, 2] + y * G[..., 1, 0]
                     - 2 * x * G[..., 1, 1] - w * G[..., 1, 2] + z * G[..., 2, 0]
                     + w * G[..., 2, 1] - 2 * x * G[..., 2, 2])
    g[..., 2] = 2 * (-2 * y * G[..., 0, 0] + x * G[..., 0, 1] + w * G[..., 0, 2]
                     + x * G[..., 1, 0] + z * G[..., 1, 2] - w * G[..., 2, 0]
                     + z * G[..., 2, 1] - 2 * y * G[..., 2, 2])
    g[..., 3] = 2 * (-2 * z * G[..., 0, 0] - w * G[..., 0, 1] + x * G[..., 0, 2]
                     + w * G[..., 1, 0] - 2 * z * G[..., 1, 1] + y * G[..., 1, 2]
                     + x * G[..., 2, 0] + y * G[..., 2, 1])
    return (g - qn * np.sum(qn * g, axis=-1, keepdims=True)) / norm


def quat_multiply(a, b):
    """Hamilton product ``a * b`` (broadcasting over leading axes)."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_multiply_backward(a, b, grad):
    """Gradients of ``quat_multiply(a, b)`` with respect to ``a`` and ``b``."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    gw, gx, gy, gz = np.moveaxis(grad, -1, 0)
    ga = np.stack([
        gw * bw + gx * bx + gy * by + gz * bz,
        -gw * bx + gx * bw - gy * bz + gz * by,
        -gw * by + gx * bz + gy * bw - gz * bx,
        -gw * bz - gx * by + gy * bx + gz * bw,
    ], axis=-1)
    gb = np.stack([
        gw * aw + gx * ax + gy * ay + gz * az,
        -gw * ax + gx * aw + gy * az - gz * ay,
        -gw * ay - gx * az + gy * aw + gz * ax,
        -gw * az + gx * ay - gy * ax + gz * aw,
    ], axis=-1)
    return ga, gb


def rotmat_to_quat(R):
    """Inverse of :func:`quat_to_rotmat` for a batch ``(..., 3, 3)``; ``w >= 0``."""
    from scipy.spatial.transform import Rotation

    R = np.asarray(R, dtype=np.float64)
    xyzw = Rotation.from_matrix(R.reshape(-1, 3, 3)).as_quat()
    out = np.concatenate([xyzw[:, 3:], xyzw[:, :3]], axis=1)
    out[out[:, 0] < 0] *= -1
    return out.reshape(R.shape[:-2] + (4,))


# --------------------------------------------------------------------------
# covariance and density

def build_covariance(log_scales, q):
    """``R S S^T R^T`` with ``S = diag(exp(log_scales))``; batched or single."""
    log_scales = np.asarray(log_scales, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if not (np.all(np.isfinite(log_scales)) and np.all(np.isfinite(q))):
        raise InvalidInputError("non-finite covariance input")
    s = np.exp(np.maximum(log_scales, MIN_LOG_SCALE))
    R = quat_to_rotmat(q)
    M = R * s[..., None, :]
    cov = M @ np.swapaxes(M, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def gaussian_density(x, mu, cov) -> float:
    """Unnormalised density ``exp(-0.5 (x-mu)^T cov^-1 (x-mu))``."""
    cov = np.asarray(cov, dtype=np.float64)
    d = np.asarray(x, dtype=np.float64) - np.asarray(mu, dtype=np.float64)
    eig = np.linalg.eigvalsh(cov)
    if eig.min() <= 1e-12 * max(1.0, eig.max()) or eig.min() < 1e-24:
        raise DegenerateCovarianceError("covariance is singular")
    return float(np.exp(-0.5 * d @ np.linalg.solve(cov, d)))


# --------------------------------------------------------------------------
# spherical harmonics

def sh_basis(dirs):
    """Real SH basis of degrees 0-3 evaluated at unit directions, ``(..., 16)``."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    out = np.empty(d.shape[:-1] + (N_SH_BASIS,))
    out[..., 0] = SH_C0
    out[..., 1] = -SH_C1 * y
    out[..., 2] = SH_C1 * z
    out[..., 3] = -SH_C1 * x
    out[..., 4] = SH_C2[0] * x * y
    out[..., 5] = SH_C2[1] * y * z
    out[..., 6] = SH_C2[2] * (2 * zz - xx - yy)
    out[..., 7] = SH_C2[3] * x * z
    out[..., 8] = SH_C2[4] * (xx - yy)
    out[..., 9] = SH_C3[0] * y * (3 * xx - yy)
    out[..., 10] = SH_C3[1] * x * y * z
    out[..., 11] = SH_C3[2] * y * (4 * zz - xx - yy)
    out[..., 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
    out[..., 13] = SH_C3[4] * x * (4 * zz - xx - yy)
    out[..., 14] = SH_C3[5] * z * (xx - yy)
    out[..., 15] = SH_C3[6] * x * (xx - 3 * yy)
    return out


def sh_basis_jacobian(dirs):
    """Partial derivatives of :func:`sh_basis` w.r.t. (x, y, z): ``(..., 16, 3)``.

    The direction components are treated as independent variables; callers
    chain through the normalisation themselves.
    """
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    J = np.zeros(d.shape[:-1] + (N_SH_BASIS, 3))
    J[..., 1, 1] = -SH_C1
    J[..., 2, 2] = SH_C1
    J[..., 3, 0] = -SH_C1
    J[..., 4, 0], J[..., 4, 1] = SH_C2[0] * y, SH_C2[0] * x
    J[..., 5, 1], J[..., 5, 2] = SH_C2[1] * z, SH_C2[1] * y
    J[..., 6, 0], J[..., 6, 1], J[..., 6, 2] = -2 * SH_C2[2] * x, -2 * SH_C2[2] * y, 4 * SH_C2[2] * z
    J[..., 7, 0], J[..., 7, 2] = SH_C2[3] * z, SH_C2[3] * x
    J[..., 8, 0], J[..., 8, 1] = 2 * SH_C2[4] * x, -2 * SH_C2[4] * y
    J[..., 9, 0] = SH_C3[0] * 6 * x * y
    J[..., 9, 1] = SH_C3[0] * (3 * xx - 3 * yy)
    J[..., 10, 0], J[..., 10, 1], J[..., 10, 2] = SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y
    J[..., 11, 0] = SH_C3[2] * (-2 * x * y)
    J[..., 11, 1] = SH_C3[2] * (4 * zz - xx - 3 * yy)
    J[..., 11, 2] = SH_C3[2] * 8 * y * z
    J[..., 12, 0] = SH_C3[3] * (-6 * x * z)
    J[..., 12, 1] = SH_C3[3] * (-6 * y * z)
    J[..., 12, 2] = SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)
    J[..., 13, 0] = SH_C3[4] * (4 * zz - 3 * xx - yy)
    J[..., 13, 1] = SH_C3[4] * (-2 * x * y)
    J[..., 13, 2] = SH_C3[4] * 8 * x * z
    J[..., 14, 0], J[..., 14, 1], J[..., 14, 2] = SH_C3[5] * 2 * x * z, -SH_C3[5] * 2 * y * z, SH_C3[5] * (xx - yy)
    J[..., 15, 0] = SH_C3[6] * (3 * xx - 3 * yy)
    J[..., 15, 1] = SH_C3[6] * (-6 * x * y)
    return J


def eval_sh_raw(H, view_dir):
    """Raw (unshifted, unclamped) SH colour; ``H`` is ``(..., 48)``."""
    v = np.asarray(view_dir, dtype=np.float64)
    v = v / np.linalg.norm(v, axis=-1, keepdims=True)
    basis = sh_basis(v)
    H = np.asarray(H, dtype=np.float64)
    H = H.reshape(H.shape[:-1] + (3, N_SH_BASIS))
    return np.einsum("...ck,...k->...c", H, basis)


def eval_sh(H, view_dir):
    """Evaluate degree-3 SH colour. Returns ``(display_rgb, raw_rgb)``."""
    raw = eval_sh_raw(np.asarray(H, dtype=np.float64), view_dir)
    return np.clip(raw + 0.5, 0.0, 1.0), raw


def rgb_to_sh_dc(rgb):
    """DC coefficient that displays as ``rgb`` under the +0.5 offset."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def sh_from_rgb(rgb):
    """Degree-0-only coefficient block ``(N, 48)`` for per-point colours."""
    rgb = np.atleast_2d(rgb)
    H = np.zeros((rgb.shape[0], 3, N_SH_BASIS))
    H[:, :, 0] = rgb_to_sh_dc(rgb)
    return H.reshape(-1, N_SH)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


# --------------------------------------------------------------------------
# containers

@dataclass
class GaussianCloud:
    """Parameterised point set ``{mu, S, R, alpha, H}`` of a head.

    ``opacity_weight`` is an optional per-point multiplier applied on top of
    ``sigmoid(opacity_logits)``; used by the fusion mask so that the frozen
    logits stay bit-identical.
    """

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    uv: np.ndarray | None = None
    is_facial: np.ndarray | None = None
    opacity_weight: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.positions)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(n, 3)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.sh_coeffs = np.asarray(self.sh_coeffs, dtype=np.float64).reshape(n, N_SH)
        if self.uv is None:
            self.uv = np.zeros((n, 2))
        if self.is_facial is None:
            self.is_facial = np.zeros(n, dtype=bool)
        self.uv = np.asarray(self.uv, dtype=np.float64).reshape(n, 2)
        self.is_facial = np.asarray(self.is_facial, dtype=bool).reshape(n)
        if self.opacity_weight is not None:
            self.opacity_weight = np.asarray(self.opacity_weight, dtype=np.float64).reshape(n)

    def __len__(self):
        return len(self.positions)

    @property
    def scales(self):
        return np.exp(np.maximum(self.log_scales, MIN_LOG_SCALE))

    @property
    def opacities(self):
        a = sigmoid(self.opacity_logits)
        if self.opacity_weight is not None:
            a = a * self.opacity_weight
        return a

    def copy(self) -> "GaussianCloud":
        return replace(self, **{f: (None if getattr(self, f) is None else getattr(self, f).copy())
                                for f in FIELDS + ("uv", "is_facial", "opacity_weight")})

    def subset(self, idx) -> "GaussianCloud":
        idx = np.asarray(idx)
        return GaussianCloud(*(getattr(self, f)[idx].copy() for f in FIELDS), uv=self.uv[idx].copy(),
                             is_facial=self.is_facial[idx].copy(),
                             opacity_weight=None if self.opacity_weight is None else self.opacity_weight[idx].copy())

    @classmethod
    def empty(cls) -> "GaussianCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, N_SH)))

    @classmethod
    def concat(cls, clouds) -> "GaussianCloud":
        clouds = list(clouds)
        weights = None
        if any(c.opacity_weight is not None for c in clouds):
            weights = np.concatenate([np.ones(len(c)) if c.opacity_weight is None else c.opacity_weight
                                      for c in clouds])
        return cls(*(np.concatenate([getattr(c, f) for c in clouds]) for f in FIELDS),
                   uv=np.concatenate([c.uv for c in clouds]),
                   is_facial=np.concatenate([c.is_facial for c in clouds]),
                   opacity_weight=weights)


FIELDS = ("positions", "log_scales", "rotations", "opacity_logits", "sh_coeffs")


@dataclass
class Camera:
    """Pinhole camera; ``rotation``/``translation`` map world to camera.

    Camera axes are x right, y down, z forward. Pixel ``(row i, col j)`` has
    its centre at image coordinates ``(j + 0.5, i + 0.5)``.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int
    name: str = field(default="", compare=False)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.width = int(self.width)
        self.height = int(self.height)
        R = self.rotation
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise InvalidInputError("camera rotation must be orthonormal with det +1")

    @property
    def center(self):
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def project(self, points):
        """Pixel coordinates ``(N, 2)`` and camera depth ``(N,)``."""
        p = self.world_to_camera(points)
        z = p[..., 2]
        uv = np.stack([self.fx * p[..., 0] / z + self.cx, self.fy * p[..., 1] / z + self.cy], axis=-1)
        return uv, z

    def to_dict(self):
        return {"name": self.name, "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "R": self.rotation.reshape(-1).tolist(), "t": self.translation.tolist(),
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d):
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], np.asarray(d["R"]).reshape(3, 3),
                   d["t"], d["width"], d["height"], name=d.get("name", ""))


def look_at_camera(position, target, width, height, fx, fy=None, up=(0.0, 1.0, 0.0), name=""):
    """Camera at ``position`` looking at ``target`` with world ``up`` pointing image-up."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward /= np.linalg.norm(forward)
    down = -np.asarray(up, dtype=np.float64)
    right = np.cross(down, forward)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return Camera(fx, fx if fy is None else fy, width / 2.0, height / 2.0, R, -R @ position,
                  width, height, name=name)
