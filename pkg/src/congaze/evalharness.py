"""Metrics, subject-level cross-validation, dataset I/O and the ablation dispatcher."""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .augment import read_landmark_csv, write_landmark_csv
from .calibrate import CalibrationConfig, calibrate, predict_gaze, select_calibration_samples
from .datamodel import (FaceDataset, FaceSample, GazeDirection, ValidationError, from_uint8,
                        gaze_array_to_vectors, to_uint8)
from .nets import Checkpoint, ModelConfig, build_model, config_hash
from .seeding import derive_seed
from .train import PretrainConfig, pretrain, pretrain_supervised

log = logging.getLogger(__name__)

PROTOCOLS = ("five_fold", "leave_one_subject_out", "cross_dataset")
LAYOUTS = ("generic_csv", "synthetic")
LABEL_COLUMNS = ["image_path", "subject_id", "pitch_rad", "yaw_rad"]


# --------------------------------------------------------------------------- metrics

def angular_error(pred: GazeDirection, truth: GazeDirection) -> float:
    """Angle in degrees between the two gaze directions."""
    return float(angular_errors(pred.as_array()[None], truth.as_array()[None])[0])


def angular_errors(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-row angle in degrees between ``(N, 2)`` (pitch, yaw) arrays.

    Equal to arccos of the clamped dot product of the unit vectors; the atan2
    form keeps full precision near 0 and 180 degrees.
    """
    u, v = gaze_array_to_vectors(pred), gaze_array_to_vectors(truth)
    dot = np.clip(np.sum(u * v, axis=1), -1.0, 1.0)
    cross = np.linalg.norm(np.cross(u, v), axis=1)
    return np.degrees(np.arctan2(cross, dot))


# --------------------------------------------------------------------------- folds

@dataclass(frozen=True)
class Fold:
    index: int
    train_subjects: tuple
    test_subjects: tuple


def make_folds(dataset: FaceDataset | int, kind: str, n_folds: int = 5) -> list[Fold]:
    """Subject-level folds; five_fold groups are contiguous and differ in size by at most one."""
    n = dataset if isinstance(dataset, int) else dataset.n_subjects
    subjects = list(range(n))
    if kind == "leave_one_subject_out":
        if n < 2:
            raise ValidationError("leave-one-subject-out needs at least 2 subjects")
        groups = [[s] for s in subjects]
    elif kind == "five_fold":
        if n < n_folds:
            raise ValidationError(f"{n_folds}-fold split needs at least {n_folds} subjects, got {n}")
        groups = [g.tolist() for g in np.array_split(subjects, n_folds)]
    else:
        raise ValidationError(f"folds are defined for five_fold and leave_one_subject_out, not {kind!r}")
    return [Fold(k, tuple(s for s in subjects if s not in g), tuple(g)) for k, g in enumerate(groups)]


def check_fold_partition(folds: Sequence[Fold], n_subjects: int) -> list[str]:
    """Problems with a fold list: overlapping or missing test subjects, test subjects in training."""
    problems = []
    seen: dict[int, int] = {}
    for f in folds:
        if set(f.train_subjects) & set(f.test_subjects):
            problems.append(f"fold {f.index}: test subjects also in training")
        for s in f.test_subjects:
            if s in seen:
                problems.append(f"subject {s} tested in folds {seen[s]} and {f.index}")
            seen[s] = f.index
    missing = sorted(set(range(n_subjects)) - set(seen))
    if missing:
        problems.append(f"subjects never tested: {missing}")
    return problems


# --------------------------------------------------------------------------- variants

@dataclass(frozen=True)
class VariantSpec:
    name: str
    pretraining: str  # none | contrastive | supervised
    gaze_crop: bool = False
    conditional_projection: bool = False
    batching: str = "mixed"
    calibration_mode: str = "full_finetune"

    def __post_init__(self):
        if self.name not in VARIANTS:
            raise ValidationError(f"unknown variant {self.name!r}; valid names: {', '.join(VARIANTS)}")


VARIANTS = ("RanNet", "SimCLR", "ConEye", "ConGaze", "ConGaze_g", "STrain")
RECIPES = {
    "RanNet": VariantSpec("RanNet", "none"),
    "SimCLR": VariantSpec("SimCLR", "contrastive", calibration_mode="head_only"),
    "ConEye": VariantSpec("ConEye", "contrastive", gaze_crop=True, calibration_mode="head_only"),
    "ConGaze": VariantSpec("ConGaze", "contrastive", True, True, "per_subject", "full_finetune"),
    "ConGaze_g": VariantSpec("ConGaze_g", "contrastive", True, True, "per_subject", "head_only"),
    "STrain": VariantSpec("STrain", "supervised"),
}


def get_variant(name: str) -> VariantSpec:
    if name not in RECIPES:
        raise ValidationError(f"unknown variant {name!r}; valid names: {', '.join(VARIANTS)}")
    return RECIPES[name]


def _pretrain_key(v: VariantSpec) -> tuple:
    """Variants with equal keys share one pretrained extractor per fold."""
    if v.pretraining == "none":
        return ("none",)
    if v.pretraining == "supervised":
        return ("supervised",)
    return ("contrastive", v.gaze_crop, v.conditional_projection, v.batching)


# --------------------------------------------------------------------------- protocol & report

@dataclass(frozen=True)
class Protocol:
    kind: str
    pretrain_dataset: str
    eval_dataset: str
    n_calibration: int = 100
    n_repeats: int = 10
    n_folds: int = 5
    folds: Optional[tuple] = None  # restrict to these fold indices; None runs all

    def __post_init__(self):
        if self.kind not in PROTOCOLS:
            raise ValidationError(f"protocol kind must be one of {PROTOCOLS}")
        if self.n_repeats < 1:
            raise ValidationError("n_repeats must be >= 1")
        if self.n_calibration < 1:
            raise ValidationError("n_calibration must be >= 1")
        if self.kind == "cross_dataset" and self.pretrain_dataset == self.eval_dataset:
            raise ValidationError("cross_dataset protocol needs distinct pretrain and eval datasets")
        if self.kind != "cross_dataset" and self.pretrain_dataset != self.eval_dataset:
            raise ValidationError(f"{self.kind} evaluates on its pretraining dataset")
        if self.folds is not None:
            object.__setattr__(self, "folds", tuple(int(f) for f in self.folds))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class HarnessConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "pretrain": self.pretrain.to_dict(),
                "calibration": self.calibration.to_dict(), "seed": self.seed}


@dataclass
class FoldResult:
    fold: int
    test_subjects: list
    repeat_seeds: list
    repeat_errors: list
    pretrain_subjects: list
    calibration_keys: list  # per repeat: [dataset, subject_index, image_index] triples
    evaluation_keys: list

    @property
    def error(self) -> float:
        return float(np.mean(self.repeat_errors))


@dataclass
class MetricsReport:
    variant: str
    protocol: dict
    config_hash: str
    folds: list
    mean: float = float("nan")
    std: float = float("nan")

    def __post_init__(self):
        self.recompute()

    def recompute(self) -> None:
        values = [f.error for f in self.folds]
        if values:
            self.mean = float(np.mean(values))
            self.std = float(np.std(values))

    @property
    def fold_errors(self) -> list:
        return [f.error for f in self.folds]

    def to_dict(self) -> dict:
        d = {"variant": self.variant, "protocol": self.protocol, "config_hash": self.config_hash,
             "mean": self.mean, "std": self.std, "fold_errors": self.fold_errors}
        d["folds"] = [asdict(f) for f in self.folds]
        return d

    def write_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["variant"], d["protocol"], d["config_hash"], [FoldResult(**f) for f in d["folds"]])


def write_summary_csv(reports: Sequence[MetricsReport], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "protocol", "mean_deg", "std_deg", "n_folds", "config_hash"])
        for r in reports:
            w.writerow([r.variant, r.protocol["kind"], f"{r.mean:.4f}", f"{r.std:.4f}",
                        len(r.folds), r.config_hash])
    return path


def check_leakage(report: MetricsReport) -> list[str]:
    """Protocol-hygiene violations recorded in a report (empty list means clean)."""
    problems = []
    within = report.protocol["kind"] != "cross_dataset"
    for f in report.folds:
        for r, (cal, ev) in enumerate(zip(f.calibration_keys, f.evaluation_keys)):
            both = {tuple(k) for k in cal} & {tuple(k) for k in ev}
            if both:
                problems.append(f"fold {f.fold} repeat {r}: {len(both)} calibration images also evaluated")
            if any(k[1] not in f.test_subjects for k in cal + ev):
                problems.append(f"fold {f.fold} repeat {r}: calibration/evaluation image outside test subjects")
        if within:
            leaked = set(f.pretrain_subjects) & set(f.test_subjects)
            if leaked:
                problems.append(f"fold {f.fold}: test subjects {sorted(leaked)} used in pretraining")
    return problems


# --------------------------------------------------------------------------- dispatcher

def _model_config(base: ModelConfig, v: VariantSpec, n_subjects: int) -> ModelConfig:
    proj = replace(base.projection, n_subjects=n_subjects if v.conditional_projection else 0)
    return replace(base, projection=proj)


def obtain_extractor(v: VariantSpec, pretrain_set: FaceDataset, config: HarnessConfig,
                     seed: int) -> Checkpoint:
    """The pretrained (or freshly initialised) model a variant starts calibration from."""
    mc = _model_config(config.model, v, pretrain_set.n_subjects)
    if v.pretraining == "none":
        return Checkpoint(build_model(mc, derive_seed(seed, "init")), {"kind": "random_init"})
    if v.pretraining == "supervised":
        if any(s.gaze is None for s in pretrain_set):
            raise ValidationError(f"{v.name} needs gaze labels on the pretraining split")
        return pretrain_supervised(pretrain_set, mc, replace(config.pretrain, seed=seed))
    crop = replace(config.pretrain.augment.crop, constrained=v.gaze_crop)
    cfg = replace(config.pretrain, seed=seed, batching=v.batching,
                  augment=replace(config.pretrain.augment, crop=crop))
    return pretrain(pretrain_set, mc, cfg)


def _key(dataset: FaceDataset, s: FaceSample) -> list:
    return [dataset.name, s.subject_index, s.image_index]


def _evaluate_fold(v: VariantSpec, protocol: Protocol, fold: Fold, pretrain_set: FaceDataset,
                   test_pool: FaceDataset, config: HarnessConfig, checkpoint: Checkpoint) -> FoldResult:
    seeds, errors, cal_keys, eval_keys = [], [], [], []
    for r in range(protocol.n_repeats):
        seed = derive_seed(config.seed, "repeat", fold.index, r)
        cal, rest = select_calibration_samples(list(test_pool), protocol.n_calibration,
                                               np.random.default_rng(seed))
        ccfg = replace(config.calibration, mode=v.calibration_mode,
                       n_samples=protocol.n_calibration, seed=seed)
        result = calibrate(checkpoint, cal, ccfg)
        pred = predict_gaze(result.model, np.stack([s.image for s in rest]))
        truth = np.array([[s.gaze.pitch, s.gaze.yaw] for s in rest])
        seeds.append(seed)
        errors.append(float(angular_errors(pred, truth).mean()))
        cal_keys.append([_key(test_pool, s) for s in cal])
        eval_keys.append([_key(test_pool, s) for s in rest])
    pre_subjects = sorted({s.subject_index for s in pretrain_set}) if v.pretraining != "none" else []
    return FoldResult(fold.index, list(fold.test_subjects), seeds, errors, pre_subjects, cal_keys, eval_keys)


def _plan(protocol: Protocol, datasets: dict) -> list:
    """(fold, pretraining subset, test pool) triples."""
    for name in (protocol.pretrain_dataset, protocol.eval_dataset):
        if name not in datasets:
            raise ValidationError(f"dataset {name!r} not provided; have {sorted(datasets)}")
    pre_ds, eval_ds = datasets[protocol.pretrain_dataset], datasets[protocol.eval_dataset]
    if protocol.kind == "cross_dataset":
        folds = [Fold(0, tuple(range(pre_ds.n_subjects)), tuple(range(eval_ds.n_subjects)))]
        plan = [(folds[0], pre_ds, eval_ds)]
    else:
        folds = make_folds(pre_ds, protocol.kind, protocol.n_folds)
        plan = [(f, pre_ds.of_subjects(f.train_subjects), eval_ds.of_subjects(f.test_subjects))
                for f in folds]
    if protocol.folds is not None:
        bad = [k for k in protocol.folds if not 0 <= k < len(folds)]
        if bad:
            raise ValidationError(f"fold indices {bad} out of range [0, {len(folds)})")
        plan = [p for p in plan if p[0].index in protocol.folds]
    for fold, _, pool in plan:
        if len(pool) <= protocol.n_calibration:
            raise ValidationError(f"fold {fold.index}: {len(pool)} test images cannot hold "
                                  f"{protocol.n_calibration} calibration samples plus an evaluation set")
    return plan


def _fold_job(args) -> list:
    names, protocol, fold, pre_set, pool, config = args
    shared: dict = {}
    out = []
    for name in names:
        v = get_variant(name)
        key = _pretrain_key(v)
        if key not in shared:
            shared[key] = obtain_extractor(v, pre_set, config, derive_seed(config.seed, "pretrain", fold.index))
        out.append(_evaluate_fold(v, protocol, fold, pre_set, pool, config, shared[key]))
    return out, {name: shared[_pretrain_key(get_variant(name))] for name in names}


def run_variants(names: Sequence[str], protocol: Protocol, datasets: dict, config: HarnessConfig,
                 jobs: int = 1, checkpoints: Optional[dict] = None) -> dict:
    """Run several variants fold by fold, sharing pretrained extractors where recipes allow.

    All variants of a fold use the same pretraining seed, so budgets are identical.
    Returns ``{variant name: MetricsReport}``. If ``checkpoints`` is a dict it receives
    the pre-calibration model of every ``(variant, fold index)``.
    """
    names = [get_variant(n).name for n in names]
    plan = _plan(protocol, datasets)
    for name in names:
        if get_variant(name).pretraining == "supervised":
            for _, pre_set, _ in plan:
                if any(s.gaze is None for s in pre_set):
                    raise ValidationError(f"{name} needs gaze labels on the pretraining split")
    tasks = [(names, protocol, fold, pre_set, pool, config) for fold, pre_set, pool in plan]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            done = list(ex.map(_fold_job, tasks))
    else:
        done = [_fold_job(t) for t in tasks]
    per_fold = [d[0] for d in done]
    if checkpoints is not None:
        for (fold, _, _), (_, models) in zip(plan, done):
            checkpoints.update({(name, fold.index): ck for name, ck in models.items()})
    chash = config_hash(config.to_dict())
    reports = {}
    for i, name in enumerate(names):
        reports[name] = MetricsReport(name, protocol.to_dict(), chash, [fr[i] for fr in per_fold])
        log.info("%s: %.3f +- %.3f deg", name, reports[name].mean, reports[name].std)
    return reports


def run_variant(variant: VariantSpec | str, protocol: Protocol, datasets: dict,
                config: HarnessConfig, jobs: int = 1) -> MetricsReport:
    name = variant.name if isinstance(variant, VariantSpec) else variant
    return run_variants([name], protocol, datasets, config, jobs)[name]


# --------------------------------------------------------------------------- dataset I/O

class DatasetError(ValidationError):
    """Ingestion failure carrying one diagnostic line per problem."""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems[:10]) + (" ..." if len(self.problems) > 10 else ""))


def write_dataset(dataset: FaceDataset, root, layout: str = "generic_csv",
                  extra: Optional[dict] = None) -> Path:
    """Write images as PNG plus labels.csv and landmarks.csv under ``root``."""
    if layout not in LAYOUTS:
        raise ValidationError(f"layout must be one of {LAYOUTS}")
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rows, marks = [], []
    for s in dataset:
        sid = dataset.subject_ids[s.subject_index]
        rel = f"images/{sid}_{s.image_index:05d}.png"
        Image.fromarray(to_uint8(s.image)).save(root / rel, optimize=False)
        pitch, yaw = (repr(s.gaze.pitch), repr(s.gaze.yaw)) if s.gaze else ("", "")
        rows.append([rel, sid, pitch, yaw])
        if s.landmarks is not None:
            marks.append((rel, s.landmarks))
    with open(root / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LABEL_COLUMNS)
        w.writerows(rows)
    if marks:
        write_landmark_csv(root / "landmarks.csv", marks)
    if layout == "synthetic":
        info = {"name": dataset.name, "subject_ids": list(dataset.subject_ids), **(extra or {})}
        (root / "synth.json").write_text(json.dumps(info, indent=2, sort_keys=True, default=str))
    return root


def ingest_dataset(root, layout: str = "generic_csv") -> FaceDataset:
    """Load a dataset directory, validating every file; raises :class:`DatasetError` listing problems."""
    if layout not in LAYOUTS:
        raise ValidationError(f"layout must be one of {LAYOUTS}")
    root = Path(root)
    labels_path = root / "labels.csv"
    if not labels_path.exists():
        raise DatasetError([f"{labels_path}: missing label file"])
    info = {}
    if layout == "synthetic":
        if not (root / "synth.json").exists():
            raise DatasetError([f"{root / 'synth.json'}: missing synthetic dataset descriptor"])
        info = json.loads((root / "synth.json").read_text())

    problems, records = [], []
    with open(labels_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != LABEL_COLUMNS:
            raise DatasetError([f"{labels_path}:1: header must be {','.join(LABEL_COLUMNS)}, got {header}"])
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(LABEL_COLUMNS):
                problems.append(f"{labels_path}:{lineno}: expected {len(LABEL_COLUMNS)} columns "
                                f"(2 label values), got {len(row)}")
                continue
            rel, sid, pitch, yaw = row
            gaze = None
            if pitch or yaw:
                try:
                    gaze = GazeDirection(float(pitch), float(yaw))
                except (ValueError, ValidationError) as e:
                    problems.append(f"{labels_path}:{lineno}: bad gaze label ({e})")
                    continue
            records.append((lineno, rel, sid, gaze))

    marks = {}
    lm_path = root / "landmarks.csv"
    if lm_path.exists():
        try:
            marks = read_landmark_csv(lm_path)
        except ValidationError as e:
            problems.append(str(e))

    subject_ids = info.get("subject_ids") or sorted({r[2] for r in records})
    index_of = {sid: i for i, sid in enumerate(subject_ids)}
    counters: dict[str, int] = {}
    samples = []
    for lineno, rel, sid, gaze in records:
        if sid not in index_of:
            problems.append(f"{labels_path}:{lineno}: unknown subject {sid!r}")
            continue
        path = root / rel
        if not path.exists():
            problems.append(f"{path}: image listed on {labels_path.name}:{lineno} not found")
            continue
        with Image.open(path) as im:
            pixels = np.asarray(im.convert("RGB"))
        lm = marks.get(rel)
        if lm is not None:
            try:
                lm.check_bounds(*pixels.shape[:2])
            except ValidationError as e:
                problems.append(f"{lm_path}: {rel}: out-of-bounds landmark ({e})")
                continue
        idx = counters.get(sid, 0)
        counters[sid] = idx + 1
        samples.append(FaceSample(from_uint8(pixels), index_of[sid], idx, gaze, lm))
    if problems:
        raise DatasetError(problems)
    if not samples:
        raise DatasetError([f"{labels_path}: no images listed"])
    ds = FaceDataset(samples, len(subject_ids), info.get("name") or root.name, list(subject_ids),
                     {"root": str(root), "layout": layout})
    counts = ds.subject_counts()
    ds.meta["subject_counts"] = {subject_ids[i]: c for i, c in counts.items()}
    log.info("ingested %d images from %s: %s", len(ds), root, ds.meta["subject_counts"])
    return ds
