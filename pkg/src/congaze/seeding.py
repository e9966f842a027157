"""Hierarchical seed derivation: every random stream hangs off one master seed."""
from __future__ import annotations

import hashlib
import random

import numpy as np
import torch


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    digest = hashlib.sha256(str(part).encode()).digest()
    return int.from_bytes(digest[:4], "little")


def derive_seed(master: int, *path) -> int:
    """Child seed for ``path`` under ``master`` (stable across runs and platforms)."""
    ss = np.random.SeedSequence(entropy=int(master) & 0xFFFFFFFFFFFFFFFF,
                                spawn_key=tuple(_key(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def make_rng(master: int, *path) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *path))


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
