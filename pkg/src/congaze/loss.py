"""Subject-specific contrastive loss.

For one subject's batch with embeddings ``Zp`` and ``Zq`` (``K`` rows each), the
loss of anchor ``j`` is::

    -log( exp(sim(Zp[j], Zq[j]) / tau) / sum_k exp(sim(Zp[j], Zq[k]) / tau) )

with the sum running over all ``k`` including ``j``. The batch loss is the mean
over anchors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .datamodel import ValidationError


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.1
    symmetric: bool = False  # also anchor at Zq and average; off by default

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValidationError(f"temperature must be positive, got {self.temperature}")


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def cosine_similarity(u, v) -> float:
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValidationError(f"dimension mismatch {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValidationError("cosine similarity of a zero-norm vector")
    return float(np.dot(u, v) / (nu * nv))


def _check(zp: torch.Tensor, zq: torch.Tensor) -> None:
    if zp.ndim != 2 or zp.shape != zq.shape:
        raise ValidationError(f"Zp and Zq must be matching (K, D) arrays, got {tuple(zp.shape)} / {tuple(zq.shape)}")
    if zp.shape[0] < 1:
        raise ValidationError("need at least one embedding pair")
    with torch.no_grad():
        if bool((zp.norm(dim=1) == 0).any()) or bool((zq.norm(dim=1) == 0).any()):
            raise ValidationError("zero-norm embedding")


def similarity_logits(zp, zq, temperature: float) -> torch.Tensor:
    """``(K, K)`` matrix of ``sim(Zp[j], Zq[k]) / tau``."""
    zp, zq = _as_tensor(zp), _as_tensor(zq)
    _check(zp, zq)
    return F.normalize(zp, dim=1) @ F.normalize(zq, dim=1).T / temperature


def _anchor_losses(logits: torch.Tensor) -> torch.Tensor:
    return torch.logsumexp(logits, dim=1) - logits.diagonal()


def pair_loss(zp, zq, j: int, temperature: float = 0.1):
    logits = similarity_logits(zp, zq, temperature)
    if not 0 <= j < logits.shape[0]:
        raise ValidationError(f"anchor index {j} out of range [0, {logits.shape[0]})")
    row = logits[j]
    return torch.logsumexp(row, dim=0) - row[j]


def batch_loss(zp, zq, temperature: float = 0.1, symmetric: bool = False):
    logits = similarity_logits(zp, zq, temperature)
    loss = _anchor_losses(logits).mean()
    if symmetric:
        loss = 0.5 * (loss + _anchor_losses(logits.T).mean())
    return loss
