"""Unsupervised pretraining: one subject batch, one loss, one optimizer step per iteration."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugmentConfig, build_mixed_pair_batch, build_pair_batch
from .datamodel import FaceDataset, ValidationError
from .loss import batch_loss
from .nets import Checkpoint, GazeModel, ModelConfig, build_model, config_hash, to_tensor
from .seeding import derive_seed

log = logging.getLogger(__name__)

BATCHING = ("per_subject", "mixed")


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, batch_seed: int, value: float):
        super().__init__(f"non-finite loss {value} at iteration {iteration} (batch seed {batch_seed})")
        self.iteration = iteration
        self.batch_seed = batch_seed


@dataclass
class PretrainConfig:
    batch_size: int = 64
    learning_rate: float = 0.01
    optimizer: str = "adam"
    n_iterations: int = 500
    temperature: float = 0.1
    symmetric_loss: bool = False
    seed: int = 0
    batching: str = "per_subject"
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValidationError("batch_size must be >= 2")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if self.n_iterations < 0:
            raise ValidationError("n_iterations must be >= 0")
        if self.optimizer != "adam":
            raise ValidationError(f"unsupported optimizer {self.optimizer!r}")
        if self.batching not in BATCHING:
            raise ValidationError(f"batching must be one of {BATCHING}")
        if not self.temperature > 0:
            raise ValidationError("temperature must be positive")
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig.from_dict(self.augment)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = self.augment.to_dict()
        return d


@dataclass
class TraceRow:
    iteration: int
    subject_index: int
    loss: float


def sample_subject_batch(dataset: FaceDataset, batch_size: int, rng: np.random.Generator) -> list:
    """All images of one uniformly chosen subject, subsampled without replacement."""
    by_subject = {i: idx for i, idx in dataset.indices_by_subject().items() if len(idx) >= 2}
    if not by_subject:
        raise ValidationError("dataset has no subject with at least two images")
    subjects = sorted(by_subject)
    subject = subjects[int(rng.integers(len(subjects)))]
    idx = by_subject[subject]
    chosen = rng.choice(len(idx), size=min(batch_size, len(idx)), replace=False)
    return [dataset[idx[k]] for k in chosen]


def sample_mixed_batch(dataset: FaceDataset, batch_size: int, rng: np.random.Generator) -> list:
    if len(dataset) < 2:
        raise ValidationError("dataset needs at least two images")
    chosen = rng.choice(len(dataset), size=min(batch_size, len(dataset)), replace=False)
    return [dataset[int(k)] for k in chosen]


def _make_optimizer(model: GazeModel, lr: float) -> torch.optim.Optimizer:
    params = list(model.extractor.parameters()) + list(model.projection.parameters())
    return torch.optim.Adam(params, lr=lr)


def contrastive_step(model: GazeModel, optimizer, views_p, views_q, subject_index,
                     cfg: PretrainConfig) -> float:
    """Forward both view sets through F and S, compute the batch loss, step once."""
    k = len(views_p)
    x = to_tensor(np.concatenate([views_p, views_q]))
    h = model.features(x)
    if model.projection.n_subjects:
        idx = torch.as_tensor(np.asarray(subject_index)).reshape(-1)
        idx = idx.expand(k) if idx.numel() == 1 else idx
        z = model.projection(h, torch.cat([idx, idx]))
    else:
        z = model.projection(h)
    loss = batch_loss(z[:k], z[k:], cfg.temperature, cfg.symmetric_loss)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def pretrain(dataset: FaceDataset, model_cfg: ModelConfig, cfg: PretrainConfig,
             resume: Optional[Checkpoint] = None, checkpoint_every: int = 0,
             on_checkpoint: Optional[Callable[[Checkpoint], None]] = None) -> Checkpoint:
    """Contrastive pretraining of F and S; returns a checkpoint carrying the loss trace.

    Every random draw of iteration ``t`` derives from ``(cfg.seed, t)``, so a run
    resumed from a saved checkpoint reproduces the uninterrupted trace.
    """
    conditional = model_cfg.projection.n_subjects > 0
    if conditional and model_cfg.projection.n_subjects != dataset.n_subjects:
        raise ValidationError(
            f"projection expects {model_cfg.projection.n_subjects} subjects, dataset has {dataset.n_subjects}")
    if conditional and cfg.batching != "per_subject":
        raise ValidationError("subject-conditional projection requires per_subject batching")
    if tuple(dataset.image_size) != model_cfg.backbone.input_size:
        raise ValidationError(f"dataset images {dataset.image_size} do not match backbone input "
                              f"{model_cfg.backbone.input_size}")
    if cfg.augment.crop.constrained and any(s.landmarks is None for s in dataset):
        raise ValidationError("gaze-specific cropping needs eye landmarks for every image "
                              "(provide landmarks.csv or a landmark provider)")

    if resume is not None:
        model = resume.model
        start = int(resume.meta.get("iterations", 0))
        trace = [TraceRow(*r) if not isinstance(r, TraceRow) else r for r in resume.loss_trace]
    else:
        model = build_model(model_cfg, derive_seed(cfg.seed, "init"))
        start, trace = 0, []
    optimizer = _make_optimizer(model, cfg.learning_rate)
    if resume is not None and resume.optimizer_state:
        optimizer.load_state_dict(resume.optimizer_state)

    def snapshot(iterations):
        meta = {
            "kind": "contrastive",
            "training_seed": cfg.seed,
            "iterations": iterations,
            "pretrain_config": cfg.to_dict(),
            "adam": {k: v for k, v in optimizer.defaults.items() if k in ("betas", "eps", "weight_decay")},
            "config_hash": config_hash({"model": model_cfg.to_dict(), "pretrain": cfg.to_dict()}),
        }
        return Checkpoint(model, meta, copy.deepcopy(optimizer.state_dict()),
                          [(r.iteration, r.subject_index, r.loss) for r in trace])

    model.train()
    for it in range(start, cfg.n_iterations):
        batch_seed = derive_seed(cfg.seed, "iter", it)
        rng = np.random.default_rng(batch_seed)
        if cfg.batching == "per_subject":
            samples = sample_subject_batch(dataset, cfg.batch_size, rng)
            pb = build_pair_batch(samples, cfg.augment, derive_seed(batch_seed, "augment"))
            assert len({s.subject_index for s in samples}) == 1
            vp, vq, subj = pb.views_p, pb.views_q, pb.subject_index
            ids = subj
        else:
            samples = sample_mixed_batch(dataset, cfg.batch_size, rng)
            vp, vq = build_mixed_pair_batch(samples, cfg.augment, derive_seed(batch_seed, "augment"))
            subj, ids = -1, [s.subject_index for s in samples]
        value = contrastive_step(model, optimizer, vp, vq, ids, cfg)
        if not math.isfinite(value):
            raise TrainingDiverged(it, batch_seed, value)
        trace.append(TraceRow(it, int(subj), value))
        if it % 50 == 0:
            log.info("iter %d subject %d loss %.4f", it, subj, value)
        if on_checkpoint is not None and checkpoint_every > 0 and (it + 1) % checkpoint_every == 0:
            on_checkpoint(snapshot(it + 1))
    model.eval()
    return snapshot(max(start, cfg.n_iterations))


# --------------------------------------------------------------------------- supervised

def regression_loss(pred: torch.Tensor, target: torch.Tensor, kind: str = "mae") -> torch.Tensor:
    if kind == "mae":
        return (pred - target).abs().mean()
    if kind == "mse":
        return F.mse_loss(pred, target)
    raise ValidationError(f"unknown regression loss {kind!r}")


def pretrain_supervised(dataset: FaceDataset, model_cfg: ModelConfig, cfg: PretrainConfig) -> Checkpoint:
    """Supervised pretraining of F and the gaze estimator on labelled images (STrain)."""
    labels = torch.as_tensor(dataset.gaze_array(), dtype=torch.float32)
    images = to_tensor(dataset.images())
    model = build_model(model_cfg, derive_seed(cfg.seed, "init"))
    params = list(model.extractor.parameters()) + list(model.estimator.parameters())
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate)
    trace = []
    model.train()
    for it in range(cfg.n_iterations):
        rng = np.random.default_rng(derive_seed(cfg.seed, "iter", it))
        idx = torch.as_tensor(rng.choice(len(dataset), size=min(cfg.batch_size, len(dataset)), replace=False))
        loss = regression_loss(model(images[idx]), labels[idx])
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDiverged(it, derive_seed(cfg.seed, "iter", it), value)
        trace.append((it, -1, value))
    model.eval()
    meta = {"kind": "supervised", "training_seed": cfg.seed, "iterations": cfg.n_iterations,
            "pretrain_config": cfg.to_dict(),
            "config_hash": config_hash({"model": model_cfg.to_dict(), "pretrain": cfg.to_dict()})}
    return Checkpoint(model, meta, None, trace)
