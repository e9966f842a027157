"""Gaze-specific augmentation: periocular-constrained cropping plus colour distortion.

An operator is sampled independently of any image (area, aspect, uniform
variates for box choice and offset, colour factors). It is resolved against a
concrete image only when applied, which yields the crop window actually used;
the window is returned so callers can verify the containment guarantee.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .datamodel import (AugmentedPairBatch, CropWindow, EyeLandmarks, FaceSample,
                        PeriocularBox, ValidationError)
from .seeding import derive_seed

COLOR_OPS = ("brightness", "contrast", "saturation", "hue")


@dataclass(frozen=True)
class CropParams:
    area_fraction_range: tuple = (0.3, 1.0)
    aspect_ratio_range: tuple = (0.75, 1.33)
    margin: float = 0.25  # periocular box expansion, fraction of box size per side
    constrained: bool = True  # False gives a conventional random resized crop
    interpolation: str = "bilinear"

    def __post_init__(self):
        lo, hi = self.area_fraction_range
        if not 0 < lo <= hi <= 1:
            raise ValidationError(f"area_fraction_range must satisfy 0 < lo <= hi <= 1, got {(lo, hi)}")
        alo, ahi = self.aspect_ratio_range
        if not 0 < alo <= ahi:
            raise ValidationError(f"aspect_ratio_range must be positive and ordered, got {(alo, ahi)}")
        if self.margin < 0:
            raise ValidationError("margin must be non-negative")
        if self.interpolation not in ("bilinear", "nearest"):
            raise ValidationError(f"unknown interpolation {self.interpolation!r}")


@dataclass(frozen=True)
class ColorParams:
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grayscale_probability: float = 0.2

    def __post_init__(self):
        for name in ("brightness", "contrast", "saturation"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValidationError(f"{name} strength must be in [0, 1]")
        if not 0 <= self.hue <= 0.5:
            raise ValidationError("hue strength must be in [0, 0.5]")
        if not 0 <= self.grayscale_probability <= 1:
            raise ValidationError("grayscale_probability must be in [0, 1]")


@dataclass(frozen=True)
class AugmentConfig:
    """The distribution T from which operator pairs are drawn."""

    crop: CropParams = field(default_factory=CropParams)
    color: ColorParams = field(default_factory=ColorParams)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        crop = dict(d.get("crop", {}))
        for k in ("area_fraction_range", "aspect_ratio_range"):
            if k in crop:
                crop[k] = tuple(crop[k])
        return cls(CropParams(**crop), ColorParams(**d.get("color", {})))

    def to_dict(self) -> dict:
        return {"crop": asdict(self.crop), "color": asdict(self.color)}


# --------------------------------------------------------------------------- landmarks

class LandmarkProvider(Protocol):
    def __call__(self, sample: FaceSample) -> Optional[EyeLandmarks]: ...


def ground_truth_landmarks(sample: FaceSample) -> Optional[EyeLandmarks]:
    """Provider for datasets that already carry landmarks (synthetic or ingested)."""
    return sample.landmarks


class CsvLandmarkProvider:
    """Landmarks looked up in a landmark CSV; ``key`` maps a sample to its image path."""

    def __init__(self, path, key: Callable[[FaceSample], str]):
        self.table = read_landmark_csv(path)
        self.key = key

    def __call__(self, sample: FaceSample) -> Optional[EyeLandmarks]:
        return self.table.get(self.key(sample))


def write_landmark_csv(path, rows: Sequence[tuple]) -> None:
    """``rows`` are ``(image_path, EyeLandmarks)``; point counts go in the header."""
    rows = list(rows)
    if not rows:
        raise ValidationError("no landmark rows to write")
    n_left = len(rows[0][1].left_outline)
    n_right = len(rows[0][1].right_outline)
    header = ["image_path", f"left_points={n_left}", f"right_points={n_right}"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for image_path, lm in rows:
            if len(lm.left_outline) != n_left or len(lm.right_outline) != n_right:
                raise ValidationError(f"inconsistent point counts for {image_path}")
            coords = [repr(float(c)) for pt in (*lm.left_outline, *lm.right_outline) for c in pt]
            w.writerow([image_path, *coords])


def read_landmark_csv(path) -> dict:
    path = Path(path)
    out = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        try:
            header = next(r)
            n_left = int(header[1].split("=")[1])
            n_right = int(header[2].split("=")[1])
        except (StopIteration, IndexError, ValueError) as e:
            raise ValidationError(f"{path}: malformed landmark header") from e
        want = 1 + 2 * (n_left + n_right)
        for lineno, row in enumerate(r, start=2):
            if len(row) != want:
                raise ValidationError(f"{path}:{lineno}: expected {want} columns, got {len(row)}")
            try:
                c = [float(v) for v in row[1:]]
            except ValueError as e:
                raise ValidationError(f"{path}:{lineno}: non-numeric coordinate") from e
            pts = list(zip(c[0::2], c[1::2]))
            out[row[0]] = EyeLandmarks(pts[:n_left], pts[n_left:])
    return out


# --------------------------------------------------------------------------- gaze cropping

def periocular_boxes(sample: FaceSample, margin: float = 0.25,
                     provider: LandmarkProvider = ground_truth_landmarks):
    """(left, right) periocular boxes: outline bbox grown by ``margin`` per side, clipped."""
    lm = provider(sample)
    if lm is None:
        raise ValidationError(
            "sample has no eye landmarks; supply a landmark provider or a precomputed landmarks.csv")
    h, w = sample.size
    boxes = []
    for outline in (lm.left_outline, lm.right_outline):
        pts = np.asarray(outline)
        x0, y0 = pts.min(axis=0)
        x1, y1 = pts.max(axis=0)
        mx, my = margin * (x1 - x0), margin * (y1 - y0)
        boxes.append(PeriocularBox(max(0.0, x0 - mx), max(0.0, y0 - my),
                                   min(float(w), x1 + mx), min(float(h), y1 + my)))
    return boxes[0], boxes[1]


def _window_size(area: float, aspect: float, h: int, w: int) -> tuple[int, int]:
    target = area * h * w
    cw = max(1, int(round(math.sqrt(target * aspect))))
    ch = max(1, int(round(math.sqrt(target / aspect))))
    if cw > w:
        cw, ch = w, max(1, min(h, int(round(target / w))))
    if ch > h:
        ch, cw = h, max(1, min(w, int(round(target / h))))
    return cw, ch


def _box_span(box: PeriocularBox) -> tuple[int, int, int, int]:
    return math.floor(box.x_min), math.floor(box.y_min), math.ceil(box.x_max), math.ceil(box.y_max)


def _fits(box, cw, ch) -> bool:
    x0, y0, x1, y1 = _box_span(box)
    return x1 - x0 <= cw and y1 - y0 <= ch


def _resize(crop: np.ndarray, h: int, w: int, mode: str) -> np.ndarray:
    if crop.shape[0] == h and crop.shape[1] == w:
        return crop.copy()
    t = torch.from_numpy(np.array(crop, dtype=np.float32)).permute(2, 0, 1)[None]
    if mode == "nearest":
        out = F.interpolate(t, size=(h, w), mode="nearest")
    else:
        out = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy()


@dataclass(frozen=True)
class CropDraw:
    """Image-independent randomness of one crop."""

    area: float
    aspect: float
    u_box: float
    u_x: float
    u_y: float
    retries: tuple = ()  # extra (area, aspect) draws used if nothing fits


def sample_crop_draw(params: CropParams, rng: np.random.Generator, n_retries: int = 32) -> CropDraw:
    lo, hi = params.area_fraction_range
    alo, ahi = params.aspect_ratio_range
    area, aspect = rng.uniform(lo, hi), rng.uniform(alo, ahi)
    u = rng.random(3)
    retries = tuple((float(a), float(r)) for a, r in
                    zip(rng.uniform(lo, hi, n_retries), rng.uniform(alo, ahi, n_retries)))
    return CropDraw(float(area), float(aspect), float(u[0]), float(u[1]), float(u[2]), retries)


def _min_feasible_area(boxes, h, w) -> float:
    return min((b.x_max - b.x_min) * (b.y_max - b.y_min) for b in boxes) / (h * w)


def resolve_window(draw: CropDraw, size, boxes, params: CropParams) -> tuple[CropWindow, Optional[int]]:
    """Crop window for ``draw`` on an image of ``size``; also returns the preserved box index."""
    h, w = size
    if not params.constrained:
        cw, ch = _window_size(draw.area, draw.aspect, h, w)
        x0 = min(int(draw.u_x * (w - cw + 1)), w - cw)
        y0 = min(int(draw.u_y * (h - ch + 1)), h - ch)
        return CropWindow(x0, y0, cw, ch), None
    for area, aspect in ((draw.area, draw.aspect), *draw.retries):
        cw, ch = _window_size(area, aspect, h, w)
        fitting = [k for k, b in enumerate(boxes) if _fits(b, cw, ch)]
        if fitting:
            break
    else:
        raise ValidationError(
            "no periocular box fits any sampled crop window; minimum feasible area fraction is "
            f"{_min_feasible_area(boxes, h, w):.3f} (area_fraction_range={params.area_fraction_range})")
    k = fitting[min(int(draw.u_box * len(fitting)), len(fitting) - 1)]
    bx0, by0, bx1, by1 = _box_span(boxes[k])
    # offsets keeping the chosen box inside the window and the window inside the image
    xlo, xhi = max(0, bx1 - cw), min(bx0, w - cw)
    ylo, yhi = max(0, by1 - ch), min(by0, h - ch)
    x0 = xlo + min(int(draw.u_x * (xhi - xlo + 1)), xhi - xlo)
    y0 = ylo + min(int(draw.u_y * (yhi - ylo + 1)), yhi - ylo)
    return CropWindow(x0, y0, cw, ch), k


def apply_crop(image: np.ndarray, window: CropWindow, interpolation: str = "bilinear") -> np.ndarray:
    h, w = image.shape[:2]
    crop = image[window.y0:window.y0 + window.h, window.x0:window.x0 + window.w]
    return _resize(crop, h, w, interpolation)


def gaze_crop(sample: FaceSample, boxes, params: CropParams = CropParams(), seed: int = 0,
              return_window: bool = False):
    """Random crop preserving at least one full periocular box, resized back to the input size."""
    draw = sample_crop_draw(params, np.random.default_rng(seed))
    window, _ = resolve_window(draw, sample.size, boxes, params)
    out = apply_crop(sample.image, window, params.interpolation)
    return (out, window) if return_window else out


# --------------------------------------------------------------------------- colour

@dataclass(frozen=True)
class ColorDraw:
    factors: dict
    order: tuple
    grayscale: bool


def sample_color_draw(params: ColorParams, rng: np.random.Generator) -> ColorDraw:
    b, c, s, hue = params.brightness, params.contrast, params.saturation, params.hue
    factors = {
        "brightness": float(rng.uniform(max(0.0, 1 - b), 1 + b)),
        "contrast": float(rng.uniform(max(0.0, 1 - c), 1 + c)),
        "saturation": float(rng.uniform(max(0.0, 1 - s), 1 + s)),
        "hue": float(rng.uniform(-hue, hue)),
    }
    strengths = {"brightness": b, "contrast": c, "saturation": s, "hue": hue}
    order = tuple(COLOR_OPS[i] for i in rng.permutation(4) if strengths[COLOR_OPS[i]] > 0)
    gray = bool(rng.random() < params.grayscale_probability)
    return ColorDraw(factors, order, gray)


LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


def _gray(x: np.ndarray) -> np.ndarray:
    return (x @ LUMA)[..., None]


def _brightness(x, f):
    return np.clip(x * f, 0.0, 1.0)


def _contrast(x, f):
    mean = _gray(x).mean(axis=(1, 2, 3), keepdims=True)
    return np.clip(f * x + (1.0 - f) * mean, 0.0, 1.0)


def _saturation(x, f):
    return np.clip(f * x + (1.0 - f) * _gray(x), 0.0, 1.0)


_RGB2YIQ = np.array([[0.299, 0.587, 0.114],
                     [0.596, -0.274, -0.322],
                     [0.211, -0.523, 0.312]])
_YIQ2RGB = np.linalg.inv(_RGB2YIQ)


def _hue(x, f):
    """Rotate chroma in YIQ space by ``f`` turns (luma preserved)."""
    theta = 2 * np.pi * f.reshape(-1).astype(np.float64)
    c, s = np.cos(theta), np.sin(theta)
    rot = np.zeros((len(theta), 3, 3))
    rot[:, 0, 0] = 1.0
    rot[:, 1, 1], rot[:, 1, 2], rot[:, 2, 1], rot[:, 2, 2] = c, -s, s, c
    m = (_YIQ2RGB @ rot @ _RGB2YIQ).astype(np.float32)  # (B, 3, 3)
    b, h, w, _ = x.shape
    out = np.matmul(x.reshape(b, h * w, 3), m.transpose(0, 2, 1)).reshape(b, h, w, 3)
    return np.clip(out, 0.0, 1.0)


_COLOR_FN = {"brightness": _brightness, "contrast": _contrast,
             "saturation": _saturation, "hue": _hue}


def apply_color_batch(images: np.ndarray, draws: Sequence[ColorDraw]) -> np.ndarray:
    """Apply per-image colour draws to a ``(B, H, W, 3)`` stack.

    Images sharing the same op at a given step are processed together.
    """
    out = np.array(images, dtype=np.float32, copy=True)
    for step in range(len(COLOR_OPS)):
        for name in COLOR_OPS:
            idx = [k for k, d in enumerate(draws) if len(d.order) > step and d.order[step] == name]
            if not idx:
                continue
            f = np.array([draws[k].factors[name] for k in idx], dtype=np.float32)[:, None, None, None]
            out[idx] = _COLOR_FN[name](out[idx], f)
    gray = [k for k, d in enumerate(draws) if d.grayscale]
    if gray:
        out[gray] = np.repeat(_gray(out[gray]), 3, axis=-1)
    return out


def apply_color(image: np.ndarray, draw: ColorDraw) -> np.ndarray:
    return apply_color_batch(np.asarray(image, dtype=np.float32)[None], [draw])[0]


def color_distort(image: np.ndarray, params: ColorParams = ColorParams(), seed: int = 0,
                  return_draw: bool = False):
    """Colour jitter in a seeded random order, then optional grayscale; geometry untouched."""
    draw = sample_color_draw(params, np.random.default_rng(seed))
    out = apply_color(np.asarray(image, dtype=np.float32), draw)
    return (out, draw) if return_draw else out


# --------------------------------------------------------------------------- composed operator

@dataclass(frozen=True)
class AugmentOp:
    """One draw from T: gaze crop followed by colour distortion."""

    kind: str
    crop: CropDraw
    color: ColorDraw
    seed: int
    config: AugmentConfig

    def crop_view(self, sample: FaceSample, boxes=None) -> tuple[np.ndarray, CropWindow]:
        cp = self.config.crop
        if cp.constrained and boxes is None:
            boxes = periocular_boxes(sample, cp.margin)
        window, _ = resolve_window(self.crop, sample.size, boxes, cp)
        return apply_crop(sample.image, window, cp.interpolation), window

    def apply(self, sample: FaceSample, boxes=None) -> tuple[np.ndarray, CropWindow]:
        view, window = self.crop_view(sample, boxes)
        return apply_color(view, self.color), window

    def record(self) -> dict:
        return {"kind": self.kind, "seed": self.seed, "crop": asdict(self.crop),
                "color": {"factors": dict(self.color.factors), "order": list(self.color.order),
                          "grayscale": self.color.grayscale}}


def sample_operator(config: AugmentConfig, seed: int) -> AugmentOp:
    rng = np.random.default_rng(seed)
    return AugmentOp("composed", sample_crop_draw(config.crop, rng),
                     sample_color_draw(config.color, rng), seed, config)


def sample_operator_pair(config: AugmentConfig, seed: int) -> tuple[AugmentOp, AugmentOp]:
    """Two independent composed operators ``{p, q} ~ T``."""
    return (sample_operator(config, derive_seed(seed, "p")),
            sample_operator(config, derive_seed(seed, "q")))


def _augment_views(samples, config: AugmentConfig, seed: int):
    h, w = samples[0].size
    vp = np.empty((len(samples), h, w, 3), dtype=np.float32)
    vq = np.empty_like(vp)
    wp, wq, cp, cq = [], [], [], []
    for k, s in enumerate(samples):
        if s.size != (h, w):
            raise ValidationError("all samples in a batch must share one image size")
        p, q = sample_operator_pair(config, derive_seed(seed, k))
        boxes = periocular_boxes(s, config.crop.margin) if config.crop.constrained else None
        vp[k], win_p = p.crop_view(s, boxes)
        vq[k], win_q = q.crop_view(s, boxes)
        wp.append(win_p)
        wq.append(win_q)
        cp.append(p.color)
        cq.append(q.color)
    return apply_color_batch(vp, cp), apply_color_batch(vq, cq), wp, wq


def build_pair_batch(samples: Sequence[FaceSample], config: AugmentConfig = AugmentConfig(),
                     seed: int = 0) -> AugmentedPairBatch:
    """Views of one subject's images with a fresh ``(p, q)`` per sample."""
    if len(samples) < 2:
        raise ValidationError("a pair batch needs at least two samples")
    subjects = {s.subject_index for s in samples}
    if len(subjects) != 1:
        raise ValidationError(f"pair batch mixes subjects {sorted(subjects)}")
    vp, vq, wp, wq = _augment_views(samples, config, seed)
    return AugmentedPairBatch(vp, vq, samples[0].subject_index,
                              [s.image_index for s in samples], wp, wq)


def build_mixed_pair_batch(samples: Sequence[FaceSample], config: AugmentConfig, seed: int):
    """Pair views for a mixed-subject batch (baseline recipes); returns (views_p, views_q)."""
    vp, vq, _, _ = _augment_views(samples, config, seed)
    return vp, vq
