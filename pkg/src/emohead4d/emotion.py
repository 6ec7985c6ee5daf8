"""Emotion classes and per-frame timelines.

Class index 0 is ``neutral``; the remaining 14 are the seven expressive
emotions at ``mild`` (odd) and ``strong`` (even) intensity. Label changes
take effect on their ``start_frame``; no smoothing is applied between
segments.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import InvalidInputError

EMOTIONS = ("angry", "contempt", "disgusted", "fear", "happy", "sad", "surprised")
INTENSITIES = ("mild", "strong")
N_CLASSES = 1 + len(EMOTIONS) * len(INTENSITIES)
EMBED_DIM = 16


def class_index(label: str, intensity: str | None = None) -> int:
    label = label.strip().lower()
    if label == "neutral":
        return 0
    if label not in EMOTIONS:
        raise InvalidInputError(f"unknown emotion {label!r}")
    intensity = (intensity or "strong").strip().lower()
    if intensity not in INTENSITIES:
        raise InvalidInputError(f"unknown intensity {intensity!r}")
    return 1 + 2 * EMOTIONS.index(label) + INTENSITIES.index(intensity)


def class_label(index: int) -> tuple[str, str | None]:
    if not 0 <= index < N_CLASSES:
        raise InvalidInputError(f"emotion class {index} out of range")
    if index == 0:
        return "neutral", None
    k = index - 1
    return EMOTIONS[k // 2], INTENSITIES[k % 2]


def class_name(index: int) -> str:
    label, intensity = class_label(index)
    return label if intensity is None else f"{label}_{intensity}"


def parse_class(spec: str) -> int:
    """Accepts ``"happy_strong"``, ``"happy, strong"``, ``"happy strong"`` or ``"neutral"``."""
    parts = [p for p in spec.replace(",", " ").replace("_", " ").split() if p]
    if not parts:
        raise InvalidInputError("empty emotion spec")
    return class_index(parts[0], parts[1] if len(parts) > 1 else None)


def all_classes():
    return list(range(N_CLASSES))


@dataclass
class EmotionTimeline:
    labels: np.ndarray        # (T,) class indices

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if np.any((self.labels < 0) | (self.labels >= N_CLASSES)):
            raise InvalidInputError("emotion labels out of range")

    def __len__(self):
        return len(self.labels)

    @classmethod
    def constant(cls, index, n_frames):
        return cls(np.full(n_frames, index))

    @classmethod
    def from_segments(cls, segments, n_frames):
        """Expand ``[{start_frame, label, intensity}, ...]`` to ``n_frames`` labels."""
        if not segments:
            raise InvalidInputError("emotion timeline has no segments")
        segs = sorted(segments, key=lambda s: int(s["start_frame"]))
        if int(segs[0]["start_frame"]) != 0:
            raise InvalidInputError("emotion timeline must start at frame 0")
        labels = np.empty(n_frames, dtype=np.int64)
        for k, s in enumerate(segs):
            a = int(s["start_frame"])
            b = int(segs[k + 1]["start_frame"]) if k + 1 < len(segs) else n_frames
            labels[a:b] = class_index(s["label"], s.get("intensity"))
        return cls(labels)

    def to_segments(self):
        out = []
        for t, c in enumerate(self.labels):
            if t == 0 or c != self.labels[t - 1]:
                label, intensity = class_label(int(c))
                out.append({"start_frame": t, "label": label, "intensity": intensity})
        return out

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_segments(), indent=1))

    @classmethod
    def load(cls, path, n_frames=None):
        segs = json.loads(Path(path).read_text())
        if n_frames is None:
            raise InvalidInputError("n_frames is required to expand a timeline")
        return cls.from_segments(segs, n_frames)
