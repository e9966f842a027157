"""Core domain types shared across the package.

Images are ``H x W x 3`` float32 arrays in ``[0, 1]``. Gaze is stored as
(pitch, yaw) in radians; the camera-frame unit vector convention is
``(-cos(p) sin(y), -sin(p), -cos(p) cos(y))`` so that (0, 0) looks straight
into the camera along ``-z``.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


@dataclass(frozen=True)
class GazeDirection:
    pitch: float
    yaw: float

    def __post_init__(self):
        if not (math.isfinite(self.pitch) and math.isfinite(self.yaw)):
            raise ValidationError(f"non-finite gaze ({self.pitch}, {self.yaw})")
        if abs(self.pitch) > math.pi / 2 + 1e-12 or abs(self.yaw) > math.pi + 1e-12:
            raise ValidationError(
                f"gaze out of range: pitch={self.pitch} (|p|<=pi/2), yaw={self.yaw} (|y|<=pi)")

    def unit_vector(self) -> np.ndarray:
        return gaze_to_unit_vector(self)

    def as_array(self) -> np.ndarray:
        return np.array([self.pitch, self.yaw], dtype=np.float64)


def gaze_to_unit_vector(g: GazeDirection) -> np.ndarray:
    p, y = float(g.pitch), float(g.yaw)
    if not (math.isfinite(p) and math.isfinite(y)):
        raise ValidationError("non-finite gaze angles")
    return np.array([-math.cos(p) * math.sin(y), -math.sin(p), -math.cos(p) * math.cos(y)])


def gaze_array_to_vectors(angles: np.ndarray) -> np.ndarray:
    """Vectorised :func:`gaze_to_unit_vector` for an ``(n, 2)`` array of (pitch, yaw)."""
    angles = np.asarray(angles, dtype=np.float64)
    p, y = angles[..., 0], angles[..., 1]
    return np.stack([-np.cos(p) * np.sin(y), -np.sin(p), -np.cos(p) * np.cos(y)], axis=-1)


@dataclass(frozen=True)
class EyeLandmarks:
    left_outline: tuple
    right_outline: tuple

    def __post_init__(self):
        for name in ("left_outline", "right_outline"):
            pts = tuple((float(x), float(y)) for x, y in getattr(self, name))
            if len(pts) < 4:
                raise ValidationError(f"{name} needs at least 4 points, got {len(pts)}")
            object.__setattr__(self, name, pts)

    def check_bounds(self, height: int, width: int) -> None:
        for name in ("left_outline", "right_outline"):
            for x, y in getattr(self, name):
                if not (0 <= x <= width and 0 <= y <= height):
                    raise ValidationError(f"{name} point ({x}, {y}) outside {width}x{height} image")


@dataclass(frozen=True)
class PeriocularBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValidationError(f"degenerate box {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def contains_point(self, x: float, y: float) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max

    def inside(self, height: int, width: int) -> bool:
        return self.x_min >= 0 and self.y_min >= 0 and self.x_max <= width and self.y_max <= height


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / np.float32(255.0)


@dataclass(frozen=True)
class FaceSample:
    """The ``j``-th full-face image of subject ``i``."""

    image: np.ndarray
    subject_index: int
    image_index: int
    gaze: Optional[GazeDirection] = None
    landmarks: Optional[EyeLandmarks] = None

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float32)
        if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] == 0 or img.shape[1] == 0:
            raise ValidationError(f"image must be HxWx3, got shape {img.shape}")
        if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
            raise ValidationError("pixel values must lie in [0, 1]")
        if self.subject_index < 0:
            raise ValidationError(f"negative subject index {self.subject_index}")
        if self.landmarks is not None:
            self.landmarks.check_bounds(img.shape[0], img.shape[1])
        if img is self.image and img.flags.writeable:
            img = img.copy()
        img.flags.writeable = False
        object.__setattr__(self, "image", img)

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]


@dataclass(frozen=True)
class Representation:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise ValidationError("representation has non-finite entries")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class SubjectEmbedding:
    values: np.ndarray
    subject_index: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise ValidationError("embedding has non-finite entries")
        if np.linalg.norm(v) <= 0:
            raise ValidationError("embedding has zero norm")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class CropWindow:
    """Integer crop window (pre-resize), ``[x0, x0 + w) x [y0, y0 + h)``."""

    x0: int
    y0: int
    w: int
    h: int

    def contains_box(self, box: PeriocularBox) -> bool:
        return (self.x0 <= box.x_min and self.y0 <= box.y_min
                and self.x0 + self.w >= box.x_max and self.y0 + self.h >= box.y_max)


@dataclass
class AugmentedPairBatch:
    """Two augmented views per source image, all from one subject.

    ``(views_p[k], views_q[k])`` is gaze-consistent; ``(views_p[k], views_q[m])``
    with ``m != k`` is gaze-contrastive.
    """

    views_p: np.ndarray  # (K, H, W, 3)
    views_q: np.ndarray
    subject_index: int
    source_image_indices: list
    windows_p: list = field(default_factory=list)
    windows_q: list = field(default_factory=list)

    def __post_init__(self):
        if self.views_p.shape != self.views_q.shape:
            raise ValidationError("views_p and views_q differ in shape")
        if len(self.source_image_indices) != self.views_p.shape[0]:
            raise ValidationError("source_image_indices length mismatch")

    def __len__(self) -> int:
        return self.views_p.shape[0]

    def consistent_pairs(self) -> list[tuple[int, int]]:
        return [(k, k) for k in range(len(self))]

    def contrastive_pairs(self) -> list[tuple[int, int]]:
        n = len(self)
        return [(k, m) for k in range(n) for m in range(n) if m != k]


@dataclass
class FaceDataset:
    """An ordered collection of :class:`FaceSample` with a declared subject count."""

    samples: list
    n_subjects: int
    name: str = "dataset"
    subject_ids: Optional[list] = None  # external ids, position == subject_index
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_subjects < 1:
            raise ValidationError("dataset needs at least one subject")
        for s in self.samples:
            if s.subject_index >= self.n_subjects:
                raise ValidationError(
                    f"subject_index {s.subject_index} >= declared subject count {self.n_subjects}")
        if self.subject_ids is None:
            self.subject_ids = [str(i) for i in range(self.n_subjects)]

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[FaceSample]:
        return iter(self.samples)

    def __getitem__(self, idx):
        return self.samples[idx]

    @property
    def image_size(self) -> tuple[int, int]:
        return self.samples[0].size

    def subject_counts(self) -> dict[int, int]:
        counts = Counter(s.subject_index for s in self.samples)
        return {i: counts.get(i, 0) for i in range(self.n_subjects)}

    def indices_by_subject(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {i: [] for i in range(self.n_subjects)}
        for k, s in enumerate(self.samples):
            out[s.subject_index].append(k)
        return out

    def subset(self, indices: Sequence[int], name: Optional[str] = None) -> "FaceDataset":
        return FaceDataset([self.samples[i] for i in indices], self.n_subjects,
                           name or self.name, list(self.subject_ids), dict(self.meta))

    def of_subjects(self, subjects: Sequence[int]) -> "FaceDataset":
        keep = set(subjects)
        return self.subset([k for k, s in enumerate(self.samples) if s.subject_index in keep])

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])

    def gaze_array(self) -> np.ndarray:
        if any(s.gaze is None for s in self.samples):
            raise ValidationError("dataset contains unlabeled samples")
        return np.array([[s.gaze.pitch, s.gaze.yaw] for s in self.samples])
