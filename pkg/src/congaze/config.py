"""YAML run configs merged over dataclass defaults, plus the run manifest."""
from __future__ import annotations

import copy
import datetime as _dt
import hashlib
import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Optional

import yaml

from .calibrate import CalibrationConfig
from .datamodel import ValidationError
from .evalharness import Protocol
from .nets import ModelConfig
from .synthface import SynthDatasetSpec
from .train import PretrainConfig


def _plain(obj):
    """Dataclass/enum/tuple tree to JSON-compatible builtins."""
    if hasattr(obj, "__dataclass_fields__"):
        obj = asdict(obj)
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, Enum):
        return obj.value
    return obj


def _protocol_defaults() -> dict:
    return {"kind": "leave_one_subject_out", "pretrain_dataset": "main", "eval_dataset": "main",
            "n_calibration": 100, "n_repeats": 10, "n_folds": 5, "folds": None}


DATA = {"root": "", "layout": "generic_csv"}


def defaults(command: str) -> dict:
    model = ModelConfig().to_dict()
    pretrain = PretrainConfig().to_dict()
    calibration = CalibrationConfig().to_dict()
    table = {
        "synth": {"synth": _plain(SynthDatasetSpec()), "layout": "synthetic"},
        "pretrain": {"data": dict(DATA), "model": model, "pretrain": pretrain, "checkpoint_every": 0},
        "calibrate": {"data": dict(DATA), "calibration": calibration, "subjects": None},
        "evaluate": {"datasets": {"main": dict(DATA)}, "protocol": _protocol_defaults(), "model": model,
                     "pretrain": pretrain, "calibration": calibration, "seed": 0,
                     "variants": ["RanNet", "SimCLR", "ConEye", "ConGaze", "ConGaze_g", "STrain"]},
        "visualize": {"data": dict(DATA), "tsne": {"perplexity": 30.0, "max_iter": 1000, "seed": 0},
                      "gradcam": {"layers": None, "n_images": 4, "raw_format": "npy"}},
    }
    if command not in table:
        raise ValidationError(f"no configuration schema for command {command!r}")
    return _plain(table[command])


# sections whose keys are user-chosen names rather than a fixed schema
_FREE_KEYS = {"datasets"}


def merge(base: dict, override: dict, path: str = "") -> dict:
    """Recursive merge; keys unknown to ``base`` are rejected."""
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        where = f"{path}.{k}" if path else k
        if k not in base and path.split(".")[-1] not in _FREE_KEYS:
            raise ValidationError(f"unknown config key {where!r}; known keys: {sorted(base)}")
        if isinstance(out.get(k), dict) and isinstance(v, dict) and k not in _FREE_KEYS:
            out[k] = merge(out[k], v, where)
        elif k in _FREE_KEYS:
            out[k] = {name: merge(DATA, spec or {}, f"{where}.{name}") for name, spec in v.items()}
        else:
            out[k] = v
    return out


def load_config(command: str, path: Optional[str] = None, overrides: Optional[dict] = None) -> dict:
    user = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ValidationError(f"config file not found: {p}")
        try:
            user = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as e:
            raise ValidationError(f"{p}: not valid YAML ({e})") from e
        if not isinstance(user, dict):
            raise ValidationError(f"{p}: top level must be a mapping")
    cfg = merge(defaults(command), user)
    return merge(cfg, overrides or {})


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)


def hash_config(cfg: Any) -> str:
    """Stable under key reordering."""
    return hashlib.sha256(json.dumps(_plain(cfg), sort_keys=True).encode()).hexdigest()[:16]


# builders from config sections -------------------------------------------------

def _wrap(fn, section: str, d: dict):
    try:
        return fn(**d) if isinstance(d, dict) else fn(d)
    except TypeError as e:
        raise ValidationError(f"bad {section} section: {e}") from e


def synth_spec(d: dict) -> SynthDatasetSpec:
    return _wrap(SynthDatasetSpec, "synth", d)


def model_config(d: dict) -> ModelConfig:
    try:
        return ModelConfig.from_dict(d)
    except TypeError as e:
        raise ValidationError(f"bad model section: {e}") from e


def pretrain_config(d: dict) -> PretrainConfig:
    return _wrap(PretrainConfig, "pretrain", d)


def calibration_config(d: dict) -> CalibrationConfig:
    return _wrap(CalibrationConfig, "calibration", d)


def protocol(d: dict) -> Protocol:
    d = dict(d)
    if d.get("folds") is not None:
        d["folds"] = tuple(d["folds"])
    return _wrap(Protocol, "protocol", d)


# manifest ----------------------------------------------------------------------

def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    started: str = field(default_factory=_now)
    finished: Optional[str] = None
    status: str = "running"

    @property
    def config_hash(self) -> str:
        return hash_config(self.config)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        d = asdict(self)
        d["config_hash"] = self.config_hash
        path.write_text(json.dumps(_plain(d), indent=2, sort_keys=True, default=str))
        return path

    def finish(self, path, status: str = "ok", **outputs) -> Path:
        self.outputs.update({k: str(v) for k, v in outputs.items()})
        self.status = status
        self.finished = _now()
        return self.write(path)
