"""Head completion: other-than-face (OTF) points, decayed motion, opacity fusion.

Distances used by the decay and fusion rules are in millimetres. Scene
positions are in metres; ``unit_scale_mm`` converts between the two.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import GaussianCloud, InvalidInputError

OTF_COUNT_DEFAULT = 5000
OTF_COUNT_FULL = 85_500
DECAY_ALPHA = 0.1      # per mm
FUSION_D0 = 5.0        # mm
FUSION_DTH = 10.0      # mm


def init_otf_points(bounds, count=OTF_COUNT_DEFAULT, seed=0):
    """``count`` points uniform in the box ``bounds = (lo, hi)``."""
    lo, hi = (np.asarray(b, dtype=np.float64).reshape(3) for b in bounds)
    if count < 1:
        raise InvalidInputError("OTF count must be at least 1")
    if not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)) or np.any(hi <= lo):
        raise InvalidInputError(f"degenerate box {lo} .. {hi}")
    rng = np.random.default_rng(seed)
    return lo + rng.random((int(count), 3)) * (hi - lo)


def carve_otf_points(bounds, count, facial_positions, facial_normals, seed=0, margin=0.0):
    """Uniform box points with the region in front of the face rejected.

    A candidate is kept when it lies behind the tangent plane of its nearest
    facial point, so OTF points never start between the face and a camera.
    Rejection sampling runs until ``count`` points are accepted.
    """
    rng_seed = seed
    kept = []
    n_kept = 0
    while n_kept < count:
        cand = init_otf_points(bounds, max(count, 256), rng_seed)
        rng_seed += 1_000_003
        idx = nearest_facial(cand, facial_positions).index
        side = np.einsum("ij,ij->i", cand - facial_positions[idx], facial_normals[idx])
        cand = cand[side < -margin]
        kept.append(cand)
        n_kept += len(cand)
        if rng_seed > seed + 1_000_003 * 1000:
            raise InvalidInputError("box leaves no room behind the face")
    return np.concatenate(kept)[:count]


@dataclass
class NearestFacialIndex:
    index: np.ndarray      # (N_otf,) index into the facial set
    distance: np.ndarray   # (N_otf,) metres

    def distance_mm(self, unit_scale_mm=1000.0):
        return self.distance * unit_scale_mm


def _exact_dist(a, b):
    return np.sqrt(np.sum((a - b) ** 2, axis=-1))


def nearest_facial(otf_positions, facial_positions) -> NearestFacialIndex:
    """Exact Euclidean nearest facial point; ties go to the lowest index."""
    otf = np.asarray(otf_positions, dtype=np.float64).reshape(-1, 3)
    fac = np.asarray(facial_positions, dtype=np.float64).reshape(-1, 3)
    if len(fac) == 0:
        raise InvalidInputError("empty facial point set")
    if len(otf) == 0:
        return NearestFacialIndex(np.zeros(0, dtype=np.int64), np.zeros(0))
    tree = cKDTree(fac)
    d0, _ = tree.query(otf, k=1)
    # every point within a hair of the nearest distance is a tie candidate
    radius = d0 * (1 + 1e-9) + 1e-12
    cands = tree.query_ball_point(otf, radius)
    index = np.empty(len(otf), dtype=np.int64)
    dist = np.empty(len(otf))
    for i, c in enumerate(cands):
        c = np.sort(np.asarray(c, dtype=np.int64))
        d = _exact_dist(otf[i], fac[c])
        j = int(np.argmin(d))          # argmin returns the first (lowest index) minimum
        index[i], dist[i] = c[j], d[j]
    return NearestFacialIndex(index, dist)


def _check_nonneg(d, what="distance"):
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise InvalidInputError(f"{what} must be finite and non-negative")
    return d


def propagate_motion(delta_facial, d_mm, alpha=DECAY_ALPHA):
    """``delta_facial * exp(-alpha * d)`` with ``d`` in millimetres."""
    d = _check_nonneg(d_mm)
    return np.asarray(delta_facial, dtype=np.float64) * np.exp(-alpha * d)[..., None]


def fusion_weight(d_mm, d0=FUSION_D0, d_th=FUSION_DTH):
    """Piecewise-linear weight: 0 below ``d0``, 1 above ``d0 + d_th``."""
    d = _check_nonneg(d_mm)
    return np.clip((d - d0) / d_th, 0.0, 1.0)


@dataclass
class FusionMask:
    weights: np.ndarray       # (N,) W_p per point
    distance_mm: np.ndarray   # (N,) cached distance to the nearest facial point
    d0: float = FUSION_D0
    d_th: float = FUSION_DTH

    def __len__(self):
        return len(self.weights)


@dataclass
class HeadCompletion:
    """Cached OTF-to-face association for one canonical head."""
    is_facial: np.ndarray           # (N,) bool
    nearest: NearestFacialIndex     # over the OTF subset, indices into the facial subset
    mask: FusionMask
    alpha: float = DECAY_ALPHA
    unit_scale_mm: float = 1000.0

    @property
    def otf_distance_mm(self):
        return self.nearest.distance_mm(self.unit_scale_mm)


def build_completion(cloud: GaussianCloud, unit_scale_mm=1000.0, alpha=DECAY_ALPHA,
                     d0=FUSION_D0, d_th=FUSION_DTH) -> HeadCompletion:
    """Association computed once against canonical positions and reused per frame."""
    fac = cloud.is_facial
    if not fac.any():
        raise InvalidInputError("cloud has no facial points")
    nf = nearest_facial(cloud.positions[~fac], cloud.positions[fac])
    d = np.zeros(len(cloud))
    d[~fac] = nf.distance * unit_scale_mm
    mask = FusionMask(fusion_weight(d, d0, d_th), d, d0, d_th)
    return HeadCompletion(fac.copy(), nf, mask, alpha, unit_scale_mm)


def complete_positions(comp: HeadCompletion, canonical_positions, facial_t, delta_facial):
    """Full per-frame positions: facial points from ``facial_t``, OTF points moved by the
    decayed ``delta_facial`` of their nearest facial point."""
    pos = np.array(canonical_positions, dtype=np.float64, copy=True)
    n_fac = int(comp.is_facial.sum())
    facial_t = np.asarray(facial_t, dtype=np.float64)
    if facial_t.shape != (n_fac, 3) or np.asarray(delta_facial).shape != (n_fac, 3):
        raise InvalidInputError(f"expected {n_fac} facial positions")
    pos[comp.is_facial] = facial_t
    moved = propagate_motion(np.asarray(delta_facial)[comp.nearest.index], comp.otf_distance_mm, comp.alpha)
    pos[~comp.is_facial] += moved
    return pos


def fuse_clouds(canonical: GaussianCloud, dynamic: GaussianCloud, mask: FusionMask) -> GaussianCloud:
    """Canonical copy weighted by ``W`` followed by dynamic copy weighted by ``1 - W``."""
    if len(mask) != len(canonical) or len(mask) != len(dynamic):
        raise InvalidInputError(f"mask covers {len(mask)} points, clouds have {len(canonical)} and {len(dynamic)}")
    w = np.asarray(mask.weights, dtype=np.float64)
    c = canonical.copy()
    d = dynamic.copy()
    c.opacity_weight = w if canonical.opacity_weight is None else canonical.opacity_weight * w
    d.opacity_weight = (1.0 - w) if dynamic.opacity_weight is None else dynamic.opacity_weight * (1.0 - w)
    return GaussianCloud.concat([c, d])
