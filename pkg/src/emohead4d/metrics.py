"""PSNR, SSIM and landmark distance, plus a per-frame report container.

SSIM is computed on luma ``Y = 0.299 R + 0.587 G + 0.114 B`` with an 11x11
Gaussian window (sigma 1.5) and the usual stabilisers for a unit dynamic
range. Identical images get PSNR ``PSNR_CAP``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ssim_map
from .core import InvalidInputError

PSNR_CAP = 100.0
LUMA = np.array([0.299, 0.587, 0.114])


def _pair(pred, target):
    a = np.asarray(getattr(pred, "rgb", pred), dtype=np.float64)
    b = np.asarray(getattr(target, "rgb", target), dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(pred, target) -> float:
    a, b = _pair(pred, target)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def to_luma(img):
    img = np.asarray(img, dtype=np.float64)
    return img @ LUMA if img.ndim == 3 else img


def ssim(pred, target) -> float:
    a, b = _pair(pred, target)
    return float(np.mean(ssim_map(to_luma(a), to_luma(b))[0]))


def lmd(pred_landmarks, gt_landmarks) -> float:
    """Mean Euclidean distance between index-matched 2D landmarks."""
    p = np.asarray(pred_landmarks, dtype=np.float64)
    g = np.asarray(gt_landmarks, dtype=np.float64)
    if p.shape != g.shape or p.ndim != 2:
        raise InvalidInputError(f"landmark sets differ: {p.shape} vs {g.shape}")
    return float(np.mean(np.linalg.norm(p - g, axis=1)))


@dataclass
class MetricReport:
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    lmd: list = field(default_factory=list)

    @property
    def n_frames(self):
        return max(len(self.psnr), len(self.lmd))

    def add(self, psnr_value=None, ssim_value=None, lmd_value=None):
        if psnr_value is not None:
            self.psnr.append(float(psnr_value))
        if ssim_value is not None:
            self.ssim.append(float(ssim_value))
        if lmd_value is not None:
            self.lmd.append(float(lmd_value))

    def aggregate(self):
        mean = lambda xs: float(np.mean(xs)) if xs else None
        return {"psnr": mean(self.psnr), "ssim": mean(self.ssim), "lmd": mean(self.lmd)}

    def to_dict(self):
        return {"frames": self.n_frames, "aggregate": self.aggregate(),
                "per_frame": {"psnr": self.psnr, "ssim": self.ssim, "lmd": self.lmd}}

    def save_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "psnr", "ssim", "lmd"])
            for t in range(self.n_frames):
                row = [t] + [xs[t] if t < len(xs) else "" for xs in (self.psnr, self.ssim, self.lmd)]
                w.writerow(row)


def project_landmarks(cam, vertices, landmark_idx):
    uv, _ = cam.project(np.asarray(vertices)[np.asarray(landmark_idx)])
    return uv


def evaluate_sequence(pred_frames, gt_frames, cam=None, pred_vertices=None, gt_vertices=None, landmarks=None
                      ) -> MetricReport:
    """Per-frame metrics; image lists and vertex sequences must be frame-aligned."""
    if len(pred_frames) != len(gt_frames):
        raise InvalidInputError(f"{len(pred_frames)} predicted vs {len(gt_frames)} reference frames")
    rep = MetricReport()
    for p, g in zip(pred_frames, gt_frames):
        rep.add(psnr(p, g), ssim(p, g))
    if pred_vertices is not None:
        if len(pred_vertices) != len(gt_vertices):
            raise InvalidInputError(f"{len(pred_vertices)} predicted vs {len(gt_vertices)} reference geometry frames")
        for pv, gv in zip(pred_vertices, gt_vertices):
            rep.add(lmd_value=lmd(project_landmarks(cam, pv, landmarks), project_landmarks(cam, gv, landmarks)))
    return rep
