"""Per-frame vertex sequences and their binary stream format.

Header (little-endian, 24 bytes)::

    magic   4s   b"GSEQ"
    version u32  1
    T       u32  frame count
    V       u32  points per frame
    fps     f32
    flags   u32  bit 0: appearance blocks present

Then ``T`` frames, each ``V x 3`` float32 positions, followed (if flag bit 0)
by ``V x 48`` SH coefficients and ``V x 4`` quaternions.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"GSEQ"
VERSION = 1
HEADER = struct.Struct("<4sIIIfI")
FLAG_APPEARANCE = 1


class GeometryFormatError(IOError):
    pass


@dataclass
class GeometrySequence:
    vertices: np.ndarray              # (T, V, 3)
    fps: float = 25.0
    sh_coeffs: np.ndarray | None = None   # (T, V, 48)
    rotations: np.ndarray | None = None   # (T, V, 4)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        if self.vertices.ndim != 3 or self.vertices.shape[2] != 3:
            raise ValueError(f"vertices must be (T, V, 3), got {self.vertices.shape}")

    @property
    def n_frames(self):
        return self.vertices.shape[0]

    @property
    def n_vertices(self):
        return self.vertices.shape[1]

    def to_bytes(self) -> bytes:
        T, V, _ = self.vertices.shape
        flags = FLAG_APPEARANCE if self.sh_coeffs is not None else 0
        parts = [HEADER.pack(MAGIC, VERSION, T, V, float(self.fps), flags)]
        for t in range(T):
            parts.append(np.ascontiguousarray(self.vertices[t], dtype="<f4").tobytes())
            if flags:
                parts.append(np.ascontiguousarray(self.sh_coeffs[t], dtype="<f4").tobytes())
                parts.append(np.ascontiguousarray(self.rotations[t], dtype="<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "GeometrySequence":
        if len(data) < HEADER.size:
            raise GeometryFormatError("truncated header")
        magic, version, T, V, fps, flags = HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise GeometryFormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise GeometryFormatError(f"unsupported version {version}")
        per = V * (3 + (52 if flags & FLAG_APPEARANCE else 0))
        if len(data) != HEADER.size + 4 * T * per:
            raise GeometryFormatError(f"expected {HEADER.size + 4 * T * per} bytes, found {len(data)}")
        arr = np.frombuffer(data, dtype="<f4", offset=HEADER.size).reshape(T, per).astype(np.float64)
        verts = arr[:, :3 * V].reshape(T, V, 3)
        sh = rot = None
        if flags & FLAG_APPEARANCE:
            sh = arr[:, 3 * V:51 * V].reshape(T, V, 48)
            rot = arr[:, 51 * V:].reshape(T, V, 4)
        return cls(verts, fps, sh, rot)

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "GeometrySequence":
        return cls.from_bytes(Path(path).read_bytes())


def read_header(path):
    data = Path(path).read_bytes()[:HEADER.size]
    if len(data) < HEADER.size:
        raise GeometryFormatError("truncated header")
    magic, version, T, V, fps, flags = HEADER.unpack(data)
    if magic != MAGIC:
        raise GeometryFormatError(f"bad magic {magic!r}")
    return dict(version=version, frames=T, vertices=V, fps=fps, flags=flags)
