"""Shared feature extractor F, subject-conditional projection S and gaze estimator."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.models import resnet18

from .datamodel import (GazeDirection, Representation, SubjectEmbedding, ValidationError)

BACKBONES = ("tiny_conv", "resnet18_no_dense")
# conv indices offered for attention maps on tiny_conv (1-based, all four blocks)
TINY_CONV_LAYERS = (1, 2, 3, 4)
RESNET_ATTENTION_LAYERS = (9, 13, 17)


@dataclass(frozen=True)
class BackboneConfig:
    variant: str = "tiny_conv"
    input_size: tuple = (64, 64)
    feature_dim: int = 128
    channels: tuple = (32, 64, 96, 128)
    final_relu: bool = False
    standardize_input: bool = True  # zero-mean, unit-std per image before the first conv

    def __post_init__(self):
        if self.variant not in BACKBONES:
            raise ValidationError(f"unknown backbone {self.variant!r}; choose from {BACKBONES}")
        if self.feature_dim <= 0:
            raise ValidationError("feature_dim must be positive")
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "channels", tuple(int(v) for v in self.channels))
        if self.variant == "resnet18_no_dense":
            if self.feature_dim != 512:
                raise ValidationError("resnet18_no_dense has feature_dim 512")
            if self.input_size != (224, 224):
                raise ValidationError("resnet18_no_dense expects 224x224 input")
        elif self.channels[-1] != self.feature_dim:
            raise ValidationError("tiny_conv: last channel count must equal feature_dim")


@dataclass(frozen=True)
class ProjectionConfig:
    n_subjects: int = 4  # 0 gives a common (subject-agnostic) projection head
    hidden_dim: Optional[int] = None  # defaults to feature_dim
    embedding_dim: int = 128

    def __post_init__(self):
        if self.n_subjects < 0:
            raise ValidationError("n_subjects must be >= 0")
        if self.embedding_dim <= 0 or (self.hidden_dim is not None and self.hidden_dim <= 0):
            raise ValidationError("projection dims must be positive")


@dataclass(frozen=True)
class EstimatorConfig:
    hidden_dim: int = 128


def standardize_images(x: torch.Tensor, eps: float = 1e-3) -> torch.Tensor:
    """Per-image zero mean and unit std over all pixels and channels."""
    flat = x.flatten(1)
    shape = (-1,) + (1,) * (x.ndim - 1)
    return (x - flat.mean(1).view(shape)) / (flat.std(1).view(shape) + eps)


class TinyConv(nn.Module):
    """Four stride-2 conv blocks and global average pooling."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        layers = []
        c_in = 3
        for k, c_out in enumerate(cfg.channels):
            act = nn.ReLU() if k < len(cfg.channels) - 1 or cfg.final_relu else nn.Identity()
            layers.append(nn.Sequential(
                nn.Conv2d(c_in, c_out, 3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(c_out), act))
            c_in = c_out
        self.blocks = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.standardize_input = cfg.standardize_input

    def forward(self, x):
        if self.standardize_input:
            x = standardize_images(x)
        return torch.flatten(self.pool(self.blocks(x)), 1)

    def conv_layers(self) -> list:
        return [b[0] for b in self.blocks]


class ResNet18NoDense(nn.Module):
    """torchvision ResNet-18 with the final fully-connected layer removed."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.net = resnet18(weights=None)
        self.net.fc = nn.Identity()
        self.standardize_input = cfg.standardize_input

    def forward(self, x):
        return self.net(standardize_images(x) if self.standardize_input else x)

    def conv_layers(self) -> list:
        # 17 main-path 3x3/7x7 convolutions; 1x1 downsample shortcuts are not counted
        n = self.net
        convs = [n.conv1]
        for layer in (n.layer1, n.layer2, n.layer3, n.layer4):
            for block in layer:
                convs += [block.conv1, block.conv2]
        return convs


def build_backbone(cfg: BackboneConfig) -> nn.Module:
    return TinyConv(cfg) if cfg.variant == "tiny_conv" else ResNet18NoDense(cfg)


def valid_attention_layers(cfg: BackboneConfig) -> tuple:
    return TINY_CONV_LAYERS if cfg.variant == "tiny_conv" else tuple(range(1, 18))


def one_hot_encode(subject_index: int, n: int, dtype=torch.float32) -> torch.Tensor:
    if not 0 <= int(subject_index) < n:
        raise ValidationError(f"subject index {subject_index} out of range [0, {n})")
    v = torch.zeros(n, dtype=dtype)
    v[int(subject_index)] = 1
    return v


class ProjectionHead(nn.Module):
    """MLP with one hidden layer over ``concat(one_hot(i), h)``.

    With ``n_subjects == 0`` this is the ordinary common projection head.
    """

    def __init__(self, feature_dim: int, cfg: ProjectionConfig):
        super().__init__()
        self.n_subjects = cfg.n_subjects
        self.feature_dim = feature_dim
        hidden = cfg.hidden_dim or feature_dim
        self.fc1 = nn.Linear(cfg.n_subjects + feature_dim, hidden)
        self.fc2 = nn.Linear(hidden, cfg.embedding_dim)

    def forward(self, h: torch.Tensor, subject_index=None) -> torch.Tensor:
        if h.shape[-1] != self.feature_dim:
            raise ValidationError(f"representation dim {h.shape[-1]} != {self.feature_dim}")
        if self.n_subjects:
            if subject_index is None:
                raise ValidationError("subject-conditional projection needs a subject index")
            idx = torch.as_tensor(subject_index).reshape(-1)
            if idx.numel() == 1:
                idx = idx.expand(h.shape[0])
            if int(idx.min()) < 0 or int(idx.max()) >= self.n_subjects:
                raise ValidationError(f"subject index out of range [0, {self.n_subjects})")
            ids = F.one_hot(idx.long(), self.n_subjects).to(h.dtype)
            h = torch.cat([ids, h], dim=1)
        return self.fc2(F.relu(self.fc1(h)))


class GazeEstimator(nn.Module):
    """Two fully-connected layers mapping a representation to (pitch, yaw)."""

    def __init__(self, feature_dim: int, cfg: EstimatorConfig = EstimatorConfig()):
        super().__init__()
        self.feature_dim = feature_dim
        self.fc1 = nn.Linear(feature_dim, cfg.hidden_dim)
        self.fc2 = nn.Linear(cfg.hidden_dim, 2)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        if h.shape[-1] != self.feature_dim:
            raise ValidationError(f"representation dim {h.shape[-1]} != {self.feature_dim}")
        return self.fc2(F.relu(self.fc1(h)))


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(BackboneConfig(**d.get("backbone", {})),
                   ProjectionConfig(**d.get("projection", {})),
                   EstimatorConfig(**d.get("estimator", {})))


class GazeModel(nn.Module):
    """Extractor + (pretraining-only) projection + gaze estimator."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.backbone.feature_dim
        self.extractor = build_backbone(cfg.backbone)
        self.projection = ProjectionHead(d, cfg.projection)
        self.estimator = GazeEstimator(d, cfg.estimator)

    def check_images(self, x: torch.Tensor) -> None:
        want = self.cfg.backbone.input_size
        if x.ndim != 4 or x.shape[1] != 3 or tuple(x.shape[2:]) != want:
            raise ValidationError(f"expected images of shape (B, 3, {want[0]}, {want[1]}), got {tuple(x.shape)}")

    def features(self, x: torch.Tensor) -> torch.Tensor:
        self.check_images(x)
        return self.extractor(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.estimator(self.features(x))


def build_model(cfg: ModelConfig, seed: int, dtype=torch.float32) -> GazeModel:
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = GazeModel(cfg).to(dtype)
    finally:
        torch.random.set_rng_state(gen_state)
    return model


def to_tensor(images) -> torch.Tensor:
    """``(B, H, W, 3)`` numpy in [0, 1] to a ``(B, 3, H, W)`` float tensor."""
    if isinstance(images, torch.Tensor):
        return images
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


# --------------------------------------------------------------------------- value-level API

@torch.no_grad()
def extract_features(model: GazeModel, images, batch_size: int = 256) -> np.ndarray:
    """Representations ``(B, D_h)`` in inference mode."""
    was_training = model.training
    model.eval()
    try:
        x = to_tensor(images)
        dtype = next(model.parameters()).dtype
        out = [model.features(x[i:i + batch_size].to(dtype)) for i in range(0, len(x), batch_size)]
        return torch.cat(out).numpy() if out else np.zeros((0, model.cfg.backbone.feature_dim))
    finally:
        model.train(was_training)


def extract_representations(model: GazeModel, images) -> list:
    return [Representation(v) for v in extract_features(model, images)]


def project_subject_conditional(head: ProjectionHead, h, subject_index: int) -> SubjectEmbedding:
    values = h.values if isinstance(h, Representation) else h
    dtype = head.fc1.weight.dtype
    with torch.no_grad():
        z = head(torch.as_tensor(np.asarray(values), dtype=dtype).reshape(1, -1), subject_index)
    return SubjectEmbedding(z[0].numpy(), subject_index)


def estimate_gaze(estimator: GazeEstimator, h: Representation) -> GazeDirection:
    """Unconstrained (pitch, yaw) regression; values are clipped only to the type's domain."""
    if isinstance(h, SubjectEmbedding):
        raise ValidationError("the gaze estimator consumes representations, not subject embeddings")
    dtype = estimator.fc1.weight.dtype
    with torch.no_grad():
        out = estimator(torch.as_tensor(h.values, dtype=dtype).reshape(1, -1))[0].numpy()
    return GazeDirection(float(np.clip(out[0], -np.pi / 2, np.pi / 2)),
                         float(np.clip(out[1], -np.pi, np.pi)))


# --------------------------------------------------------------------------- checkpoints

def state_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in module.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    """Model weights plus metadata; the projection head is flagged pretrain-only."""

    model: GazeModel
    meta: dict = field(default_factory=dict)
    optimizer_state: Optional[dict] = None
    loss_trace: list = field(default_factory=list)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        blob = {"model": self.model.state_dict(), "optimizer": self.optimizer_state,
                "loss_trace": self.loss_trace}
        torch.save(blob, path)
        meta = dict(self.meta)
        meta.update({
            "backbone": self.model.cfg.backbone.variant,
            "model_config": self.model.cfg.to_dict(),
            "feature_dim": self.model.cfg.backbone.feature_dim,
            "n_subjects": self.model.cfg.projection.n_subjects,
            "projection_pretrain_only": True,
            "extractor_hash": state_hash(self.model.extractor),
        })
        meta["config_hash"] = meta.get("config_hash") or config_hash(meta["model_config"])
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=str))
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        meta_path = path.with_suffix(".json")
        if not meta_path.exists():
            raise ValidationError(f"checkpoint metadata sidecar missing: {meta_path}")
        meta = json.loads(meta_path.read_text())
        model = GazeModel(ModelConfig.from_dict(meta["model_config"]))
        blob = torch.load(path, map_location="cpu", weights_only=False)
        model.load_state_dict(blob["model"])
        return cls(model, meta, blob.get("optimizer"), list(blob.get("loss_trace") or []))
