"""Triangle template mesh and one-level midpoint subdivision."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import InvalidInputError


class TopologyError(InvalidInputError):
    pass


@dataclass
class TemplateMesh:
    vertices: np.ndarray               # (V, 3)
    faces: np.ndarray                  # (F, 3) int
    uv: np.ndarray                     # (V, 2) in [0, 1]^2
    landmarks: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    is_facial: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.uv = np.asarray(self.uv, dtype=np.float64)
        self.landmarks = np.asarray(self.landmarks, dtype=np.int64)
        if self.is_facial is None:
            self.is_facial = np.ones(len(self.vertices), dtype=bool)

    @property
    def n_vertices(self):
        return len(self.vertices)


def unique_edges(faces):
    """Sorted unique undirected edges ``(E, 2)`` and the per-face edge index ``(F, 3)``.

    Face edge ``k`` joins corners ``k`` and ``(k + 1) % 3``.
    """
    faces = np.asarray(faces, dtype=np.int64)
    e = np.stack([faces, np.roll(faces, -1, axis=1)], axis=2).reshape(-1, 2)
    e = np.sort(e, axis=1)
    edges, inverse, counts = np.unique(e, axis=0, return_inverse=True, return_counts=True)
    if np.any(counts > 2):
        bad = edges[counts > 2][0]
        raise TopologyError(f"edge {tuple(bad)} is shared by more than two triangles")
    return edges, inverse.reshape(-1, 3)


def mesh_upsample(vertices, faces, levels: int = 1, attributes=()):
    """Split every triangle into four using linear edge midpoints.

    New vertex order: the original vertices, then one midpoint per unique
    edge, edges sorted by ``(min index, max index)``. ``vertices`` may carry
    leading batch axes (e.g. ``(T, V, 3)``); every array in ``attributes``
    (``(V, k)`` or ``(V,)``) is interpolated the same way, boolean arrays by
    logical AND of the edge endpoints.

    Returns ``(vertices, faces, attributes)``.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    attributes = list(attributes)
    for _ in range(levels):
        V = vertices.shape[-2]
        edges, fe = unique_edges(faces)
        mid = 0.5 * (vertices[..., edges[:, 0], :] + vertices[..., edges[:, 1], :])
        vertices = np.concatenate([vertices, mid], axis=-2)
        new_attr = []
        for a in attributes:
            a = np.asarray(a)
            if a.dtype == bool:
                m = a[edges[:, 0]] & a[edges[:, 1]]
            else:
                m = 0.5 * (a[edges[:, 0]] + a[edges[:, 1]])
            new_attr.append(np.concatenate([a, m], axis=0))
        attributes = new_attr
        m01, m12, m20 = (V + fe[:, k] for k in range(3))
        a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
        faces = np.stack([
            np.stack([a, m01, m20], 1),
            np.stack([m01, b, m12], 1),
            np.stack([m20, m12, c], 1),
            np.stack([m01, m12, m20], 1),
        ], axis=1).reshape(-1, 3)
    return vertices, faces, attributes


def upsample_template(mesh: TemplateMesh, levels: int = 1) -> TemplateMesh:
    v, f, (uv, fl) = mesh_upsample(mesh.vertices, mesh.faces, levels, [mesh.uv, mesh.is_facial])
    return TemplateMesh(v, f, uv, mesh.landmarks.copy(), fl)


def vertex_normals(vertices, faces):
    """Area-weighted vertex normals; ``vertices`` may be batched ``(..., V, 3)``."""
    vertices = np.asarray(vertices, dtype=np.float64)
    if vertices.ndim > 2:
        return np.stack([vertex_normals(v, faces) for v in vertices])
    v0, v1, v2 = (vertices[faces[:, k]] for k in range(3))
    fn = np.cross(v1 - v0, v2 - v0)
    n = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(n, faces[:, k], fn)
    return n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)


def mean_edge_length(vertices, faces):
    edges, _ = unique_edges(faces)
    return float(np.linalg.norm(vertices[edges[:, 0]] - vertices[edges[:, 1]], axis=1).mean())
