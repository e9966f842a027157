"""Few-shot calibration of the gaze estimator, optionally together with the extractor."""
from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .datamodel import FaceSample, ValidationError
from .nets import Checkpoint, GazeModel, to_tensor
from .seeding import derive_seed
from .train import TrainingDiverged, regression_loss

MODES = ("full_finetune", "head_only")


@dataclass
class CalibrationConfig:
    mode: str = "full_finetune"
    n_samples: int = 100
    epochs: int = 150
    learning_rate: float = 1e-3
    seed: int = 0
    loss: str = "mae"
    max_batch_size: int = 32

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"calibration mode must be one of {MODES}")
        if self.n_samples < 1:
            raise ValidationError("n_samples must be >= 1")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be non-negative")
        if self.loss not in ("mae", "mse"):
            raise ValidationError("loss must be 'mae' or 'mse'")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CalibrationResult:
    model: GazeModel
    epoch_losses: list
    config: CalibrationConfig

    def record(self) -> dict:
        return {"mode": self.config.mode, "n_samples": self.config.n_samples,
                "seed": self.config.seed, "final_train_loss": self.epoch_losses[-1]}

    def write_record(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.record(), indent=2, sort_keys=True))
        return path


def select_calibration_samples(pool: Sequence, n: int, rng: np.random.Generator):
    """Uniform draw of ``n`` items without replacement; returns (selected, remainder)."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    if len(pool) <= n:
        raise ValidationError(f"pool of {len(pool)} is too small to hold out {n} calibration samples")
    order = rng.permutation(len(pool))
    chosen = set(order[:n].tolist())
    selected = [pool[i] for i in sorted(chosen)]
    remainder = [pool[i] for i in range(len(pool)) if i not in chosen]
    return selected, remainder


def _labels(samples: Sequence[FaceSample]) -> torch.Tensor:
    missing = [k for k, s in enumerate(samples) if s.gaze is None]
    if missing:
        raise ValidationError(f"calibration needs gaze labels; samples {missing[:5]} are unlabelled")
    return torch.tensor([[s.gaze.pitch, s.gaze.yaw] for s in samples])


def calibrate(checkpoint: Checkpoint | GazeModel, samples: Sequence[FaceSample],
              config: CalibrationConfig) -> CalibrationResult:
    """Fit the estimator (and in full mode the extractor) on a few labelled samples.

    The input checkpoint is never modified; a calibrated copy is returned.
    """
    source = checkpoint.model if isinstance(checkpoint, Checkpoint) else checkpoint
    if not samples:
        raise ValidationError("no calibration samples")
    model = copy.deepcopy(source)
    dtype = next(model.parameters()).dtype
    labels = _labels(samples).to(dtype)
    images = to_tensor(np.stack([s.image for s in samples])).to(dtype)
    model.check_images(images)

    head_only = config.mode == "head_only"
    if head_only:
        model.extractor.eval()
        model.extractor.requires_grad_(False)
        with torch.no_grad():
            cached = model.extractor(images)
        params = list(model.estimator.parameters())
    else:
        params = list(model.extractor.parameters()) + list(model.estimator.parameters())
    optimizer = torch.optim.Adam(params, lr=config.learning_rate)

    n = len(samples)
    batch = min(config.max_batch_size, n)
    rng = np.random.default_rng(derive_seed(config.seed, "calibrate"))
    epoch_losses = []
    for epoch in range(config.epochs):
        if not head_only:
            model.extractor.train()
        model.estimator.train()
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = torch.as_tensor(order[start:start + batch])
            h = cached[idx] if head_only else model.extractor(images[idx])
            loss = regression_loss(model.estimator(h), labels[idx], config.loss)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * len(idx)
        value = total / n
        if not math.isfinite(value):
            raise TrainingDiverged(epoch, config.seed, value)
        epoch_losses.append(value)
    model.eval()
    if head_only:
        model.extractor.requires_grad_(True)
    return CalibrationResult(model, epoch_losses, config)


@torch.no_grad()
def predict_gaze(model: GazeModel, images, batch_size: int = 256) -> np.ndarray:
    """``(B, 2)`` array of (pitch, yaw) in radians, inference mode."""
    was_training = model.training
    model.eval()
    try:
        x = to_tensor(images).to(next(model.parameters()).dtype)
        out = [model(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        return torch.cat(out).numpy().astype(np.float64) if out else np.zeros((0, 2))
    finally:
        model.train(was_training)
