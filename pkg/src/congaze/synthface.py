"""Procedural cartoon faces with exact gaze and eye-outline ground truth.

Geometry is defined on a 64x64 reference canvas and scaled to the requested
image size. Identity lives in appearance (skin, hair and background colours,
face shape, eye placement); gaze lives only in the iris position inside each
eye. The iris center is displaced by ``(IRIS_GAIN * yaw, -IRIS_GAIN * pitch)``
reference pixels from the eye center, so positive pitch looks up and positive
yaw moves the iris toward larger ``x``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .datamodel import (EyeLandmarks, FaceDataset, FaceSample, GazeDirection, ValidationError,
                        from_uint8, to_uint8)
from .seeding import derive_seed

REF_SIZE = 64.0
IRIS_GAIN = 9.0  # reference pixels per radian
MAX_RENDER_GAZE = 0.6
OUTLINE_POINTS = 16
# minimum normalised parameter distance between any two generated subjects
MIN_SUBJECT_DISTANCE = 0.35

# documented appearance ranges (reference pixels)
FACE_HALF_WIDTH = (19.0, 24.0)
FACE_HALF_HEIGHT = (23.0, 27.0)
EYE_LINE = (-8.0, -4.0)
EYE_SPACING = (12.0, 14.0)
EYE_SIZE = (8.0, 9.0)
EYE_ASPECT = 0.85
IRIS_RATIO = 0.36
SCLERA = np.array([0.96, 0.96, 0.94])
PUPIL = np.array([0.04, 0.03, 0.03])


@dataclass(frozen=True)
class SubjectAppearance:
    skin_tone: tuple
    face_shape: tuple  # (face half-width, face half-height, eye-line offset)
    eye_spacing: float  # half distance between eye centers
    eye_size: float  # horizontal semi-axis of each eye
    deterministic_seed: int

    def __post_init__(self):
        fw, fh, el = self.face_shape
        checks = [
            (FACE_HALF_WIDTH, fw, "face half-width"), (FACE_HALF_HEIGHT, fh, "face half-height"),
            (EYE_LINE, el, "eye line"), (EYE_SPACING, self.eye_spacing, "eye spacing"),
            (EYE_SIZE, self.eye_size, "eye size"),
        ]
        for (lo, hi), v, name in checks:
            if not lo <= v <= hi:
                raise ValidationError(f"{name} {v} outside [{lo}, {hi}]")
        if any(not 0.0 <= c <= 1.0 for c in self.skin_tone):
            raise ValidationError("skin tone must be RGB in [0, 1]")

    @property
    def extras(self) -> dict:
        """Secondary identity cues derived from ``deterministic_seed``."""
        rng = np.random.default_rng(self.deterministic_seed)
        return {
            "hair": rng.uniform(0.05, 0.55, 3),
            "background": rng.uniform(0.15, 0.85, 3),
            "iris": rng.uniform(0.1, 0.45, 3),
            "lips": np.clip(np.asarray(self.skin_tone) * [1.0, 0.55, 0.55] + [0.1, 0, 0], 0, 1),
            "mouth_width": rng.uniform(5.0, 8.0),
            "brow_thickness": rng.uniform(1.0, 2.0),
            "hair_drop": rng.uniform(4.0, 9.0),
        }

    def vector(self) -> np.ndarray:
        """Parameters normalised to [0, 1] (distinctness metric)."""
        def n(v, r):
            return (v - r[0]) / (r[1] - r[0])
        fw, fh, el = self.face_shape
        return np.array([*self.skin_tone, n(fw, FACE_HALF_WIDTH), n(fh, FACE_HALF_HEIGHT),
                         n(el, EYE_LINE), n(self.eye_spacing, EYE_SPACING), n(self.eye_size, EYE_SIZE)])


class GazeSampling(str, Enum):
    RANDOM = "random"
    GRID = "grid"


@dataclass(frozen=True)
class SynthDatasetSpec:
    n_subjects: int = 4
    images_per_subject: int = 200
    image_size: tuple = (64, 64)
    gaze_grid_or_random: GazeSampling = GazeSampling.RANDOM
    master_seed: int = 7
    gaze_range: float = 0.5
    jitter: float = 1.5  # max in-plane translation, reference pixels
    noise_sigma: float = 0.015

    def __post_init__(self):
        if self.n_subjects < 2:
            raise ValidationError(f"n_subjects must be >= 2, got {self.n_subjects}")
        if self.images_per_subject < 2:
            raise ValidationError(f"images_per_subject must be >= 2, got {self.images_per_subject}")
        h, w = self.image_size
        if h < 32 or w < 32:
            raise ValidationError(f"image_size must be at least 32x32, got {self.image_size}")
        if not 0 < self.gaze_range <= MAX_RENDER_GAZE:
            raise ValidationError(f"gaze_range must be in (0, {MAX_RENDER_GAZE}]")
        object.__setattr__(self, "gaze_grid_or_random", GazeSampling(self.gaze_grid_or_random))
        object.__setattr__(self, "image_size", (int(h), int(w)))


@dataclass
class _Layout:
    """Resolved geometry for one render, in image pixel coordinates."""

    sx: float
    sy: float
    face_c: tuple
    eye_c: list
    eye_axes: tuple
    iris_c: list
    iris_r: float
    extras: dict = field(default_factory=dict)


def _ellipse_cov(X, Y, cx, cy, a, b):
    """Anti-aliased coverage of an axis-aligned ellipse (approximate signed distance)."""
    dx, dy = (X - cx) / a, (Y - cy) / b
    q = np.sqrt(dx * dx + dy * dy) + 1e-12
    grad = np.sqrt((dx / a) ** 2 + (dy / b) ** 2) / q + 1e-12
    return np.clip(0.5 - (q - 1.0) / grad, 0.0, 1.0)


def _disk_cov(X, Y, cx, cy, r):
    return np.clip(0.5 - (np.hypot(X - cx, Y - cy) - r), 0.0, 1.0)


def _capsule_cov(X, Y, p0, p1, r):
    (x0, y0), (x1, y1) = p0, p1
    vx, vy = x1 - x0, y1 - y0
    t = np.clip(((X - x0) * vx + (Y - y0) * vy) / (vx * vx + vy * vy + 1e-12), 0.0, 1.0)
    d = np.hypot(X - (x0 + t * vx), Y - (y0 + t * vy))
    return np.clip(0.5 - (d - r), 0.0, 1.0)


def _paint(img, cov, color):
    img += cov[..., None] * (np.asarray(color, dtype=np.float64) - img)


def _layout(app: SubjectAppearance, gaze: GazeDirection, size, jitter) -> _Layout:
    h, w = size
    sx, sy = w / REF_SIZE, h / REF_SIZE
    fw, fh, el = app.face_shape
    fcx, fcy = (32.0 + jitter[0]) * sx, (34.0 + jitter[1]) * sy
    ex = [fcx - app.eye_spacing * sx, fcx + app.eye_spacing * sx]  # image-left, image-right
    ey = fcy + el * sy
    a, b = app.eye_size * sx, app.eye_size * EYE_ASPECT * sy
    off = (IRIS_GAIN * gaze.yaw * sx, -IRIS_GAIN * gaze.pitch * sy)
    iris_r = IRIS_RATIO * app.eye_size * EYE_ASPECT * min(sx, sy)
    return _Layout(sx, sy, (fcx, fcy), [(x, ey) for x in ex], (a, b),
                   [(x + off[0], ey + off[1]) for x in ex], iris_r, app.extras)


def eye_outline(center, axes, n=OUTLINE_POINTS) -> list:
    cx, cy = center
    a, b = axes
    t = np.linspace(0.0, 2 * math.pi, n, endpoint=False)
    return [(float(cx + a * math.cos(v)), float(cy + b * math.sin(v))) for v in t]


def render_face(appearance: SubjectAppearance, gaze: GazeDirection, size=(64, 64), *,
                jitter=(0.0, 0.0), noise_sigma: float = 0.0, noise_seed: int = 0,
                subject_index: int = 0, image_index: int = 0) -> FaceSample:
    """Render one face; ``landmarks`` holds the exact eye-outline polygons."""
    if abs(gaze.pitch) > MAX_RENDER_GAZE or abs(gaze.yaw) > MAX_RENDER_GAZE:
        raise ValidationError(
            f"gaze ({gaze.pitch:.3f}, {gaze.yaw:.3f}) outside renderable range +/-{MAX_RENDER_GAZE} rad")
    h, w = size
    L = _layout(appearance, gaze, size, jitter)
    ex = L.extras
    sx, sy, s = L.sx, L.sy, min(L.sx, L.sy)
    Y, X = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    img = np.empty((h, w, 3))
    grad = np.linspace(0.92, 1.05, h)[:, None, None]
    img[:] = np.clip(ex["background"] * grad, 0, 1)

    fw, fh, _ = appearance.face_shape
    fcx, fcy = L.face_c
    _paint(img, _ellipse_cov(X, Y, fcx, fcy - ex["hair_drop"] * sy, fw * 1.08 * sx, fh * 0.95 * sy), ex["hair"])
    skin = np.asarray(appearance.skin_tone)
    _paint(img, _ellipse_cov(X, Y, fcx, fcy, fw * sx, fh * sy), skin)

    a, b = L.eye_axes
    brow = ex["hair"] * 0.7
    for (cx, cy) in L.eye_c:
        by = cy - b - 2.5 * sy
        _paint(img, _capsule_cov(X, Y, (cx - a * 0.9, by), (cx + a * 0.9, by), ex["brow_thickness"] * s), brow)
    for (cx, cy), (ix, iy) in zip(L.eye_c, L.iris_c):
        eye = _ellipse_cov(X, Y, cx, cy, a, b)
        _paint(img, eye, SCLERA)
        # iris and pupil are clipped by the eye opening
        _paint(img, eye * _disk_cov(X, Y, ix, iy, L.iris_r), ex["iris"])
        _paint(img, eye * _disk_cov(X, Y, ix, iy, L.iris_r * 0.5), PUPIL)

    nose = skin * 0.78
    _paint(img, _capsule_cov(X, Y, (fcx, fcy - 2 * sy), (fcx, fcy + 6 * sy), 1.2 * s), nose)
    mw = ex["mouth_width"]
    _paint(img, _ellipse_cov(X, Y, fcx, fcy + 13 * sy, mw * sx, 1.6 * sy), ex["lips"])

    if noise_sigma > 0:
        img += np.random.default_rng(noise_seed).normal(0.0, noise_sigma, img.shape)
    # quantized to 8 bits so PNG storage is lossless
    img = from_uint8(to_uint8(img))

    marks = EyeLandmarks(eye_outline(L.eye_c[0], L.eye_axes), eye_outline(L.eye_c[1], L.eye_axes))
    return FaceSample(img, subject_index, image_index, gaze, marks)


def iris_centers(appearance: SubjectAppearance, gaze: GazeDirection, size=(64, 64),
                 jitter=(0.0, 0.0)) -> list:
    """Ground-truth iris centers (image pixels) for a render with these arguments."""
    return list(_layout(appearance, gaze, size, jitter).iris_c)


def eye_centers(appearance: SubjectAppearance, size=(64, 64), jitter=(0.0, 0.0)) -> list:
    return list(_layout(appearance, GazeDirection(0.0, 0.0), size, jitter).eye_c)


def iris_radius(appearance: SubjectAppearance, size=(64, 64)) -> float:
    return _layout(appearance, GazeDirection(0.0, 0.0), size, (0.0, 0.0)).iris_r


def sample_appearance(rng: np.random.Generator, seed: int) -> SubjectAppearance:
    u = rng.uniform
    return SubjectAppearance(
        skin_tone=tuple(float(c) for c in (u(0.35, 0.95), u(0.25, 0.8), u(0.15, 0.7))),
        face_shape=(u(*FACE_HALF_WIDTH), u(*FACE_HALF_HEIGHT), u(*EYE_LINE)),
        eye_spacing=u(*EYE_SPACING), eye_size=u(*EYE_SIZE), deterministic_seed=int(seed))


def sample_appearances(n: int, master_seed: int, max_tries: int = 10000) -> list:
    """Draw ``n`` mutually distinct appearances (rejection on ``MIN_SUBJECT_DISTANCE``)."""
    rng = np.random.default_rng(derive_seed(master_seed, "appearance"))
    out: list[SubjectAppearance] = []
    for attempt in range(max_tries):
        cand = sample_appearance(rng, derive_seed(master_seed, "extras", attempt))
        v = cand.vector()
        if all(np.linalg.norm(v - o.vector()) >= MIN_SUBJECT_DISTANCE for o in out):
            out.append(cand)
            if len(out) == n:
                return out
    raise ValidationError(f"could not draw {n} distinct subjects; lower n_subjects")


def _gaze_list(spec: SynthDatasetSpec, rng: np.random.Generator) -> list:
    n, r = spec.images_per_subject, spec.gaze_range
    if spec.gaze_grid_or_random is GazeSampling.RANDOM:
        return [GazeDirection(float(p), float(y)) for p, y in rng.uniform(-r, r, (n, 2))]
    # grid: 3 pitch rows x ceil(n/3) yaw columns, cycled to length n
    cols = max(2, math.ceil(n / 3))
    grid = [GazeDirection(float(p), float(y))
            for p in np.linspace(-r, r, 3) for y in np.linspace(-r, r, cols)]
    return [grid[k % len(grid)] for k in range(n)]


def generate_dataset(spec: SynthDatasetSpec) -> FaceDataset:
    """Deterministic under ``spec.master_seed``."""
    apps = sample_appearances(spec.n_subjects, spec.master_seed)
    samples = []
    for i, app in enumerate(apps):
        rng = np.random.default_rng(derive_seed(spec.master_seed, "subject", i))
        gazes = _gaze_list(spec, rng)
        jit = rng.uniform(-spec.jitter, spec.jitter, (spec.images_per_subject, 2))
        for j, g in enumerate(gazes):
            samples.append(render_face(
                app, g, spec.image_size, jitter=tuple(jit[j]), noise_sigma=spec.noise_sigma,
                noise_seed=derive_seed(spec.master_seed, "noise", i, j),
                subject_index=i, image_index=j))
    return FaceDataset(samples, spec.n_subjects, name=f"synth-{spec.master_seed}",
                       subject_ids=[f"s{i:02d}" for i in range(spec.n_subjects)],
                       meta={"appearances": apps})
