"""End-to-end acceptance criteria 1-14; each test prints one PASS/FAIL line."""
import math
import time

import numpy as np
import pytest
import torch

from congaze.augment import ColorParams, CropParams, color_distort, gaze_crop, periocular_boxes
from congaze.calibrate import CalibrationConfig, calibrate, select_calibration_samples
from congaze.cli import main as cli_main
from congaze.datamodel import GazeDirection
from congaze.evalharness import (HarnessConfig, Protocol, angular_error, check_fold_partition, check_leakage,
                                 make_folds, run_variants)
from congaze.loss import batch_loss, pair_loss
from congaze.nets import (EstimatorConfig, GazeEstimator, ModelConfig, ProjectionConfig, ProjectionHead,
                          state_hash)
from congaze.synthface import SynthDatasetSpec, generate_dataset
from congaze.train import PretrainConfig, pretrain
from congaze.viz import attention_map, export_embedding_scatter, region_heat

from conftest import DESK_ITERATIONS, DESK_LR, record

ABLATION_SEEDS = (0, 1, 2)
ABLATION_VARIANTS = ("RanNet", "SimCLR", "ConEye", "ConGaze", "ConGaze_g")
N_CALIBRATION = 50
GRADCAM_LAYER = 4  # last tiny_conv block

# full-scale reference errors in degrees, documented only
REFERENCE_ERRORS = {"C": 5.5, "M": 7.0, "C-M": 7.7, "E-C": 7.2, "E-M": 9.0}


def check(n, ok, detail):
    record(n, ok, detail)
    assert ok, detail


# --------------------------------------------------------------------------- oracles

def brute_pair_loss(zp, zq, j, tau):
    """Plain-python log-softmax of cosine similarities, max-shifted."""
    def cos(a, b):
        return sum(x * y for x, y in zip(a, b)) / math.sqrt(sum(x * x for x in a) * sum(y * y for y in b))
    sims = [cos(zp[j], q) / tau for q in zq]
    top = max(sims)
    return top + math.log(sum(math.exp(s - top) for s in sims)) - sims[j]


def fd_relative_error(fn, x, eps=1e-6):
    """Autograd gradient of sum(fn(x) * w) against central differences."""
    x = x.detach().clone().requires_grad_(True)
    out = fn(x)
    w = torch.randn(out.shape, dtype=x.dtype, generator=torch.Generator().manual_seed(1))
    (out * w).sum().backward()
    base = x.detach().reshape(-1)
    fd = torch.empty_like(base)
    with torch.no_grad():
        for i in range(base.numel()):
            up, dn = base.clone(), base.clone()
            up[i] += eps
            dn[i] -= eps
            fd[i] = ((fn(up.reshape(x.shape)) * w).sum() - (fn(dn.reshape(x.shape)) * w).sum()) / (2 * eps)
    return float((x.grad.reshape(-1) - fd).norm() / fd.norm())


# --------------------------------------------------------------------------- shared ablation run

@pytest.fixture(scope="session")
def ablation(desk_dataset):
    """Per seed: one leave-one-subject-out fold (held-out subject = seed), shared checkpoints."""
    t0 = time.time()
    reports, checkpoints = {}, {}
    for seed in ABLATION_SEEDS:
        proto = Protocol("leave_one_subject_out", "main", "main", n_calibration=N_CALIBRATION, n_repeats=3,
                         folds=(seed,))
        cfg = HarnessConfig(ModelConfig(), PretrainConfig(learning_rate=DESK_LR, n_iterations=DESK_ITERATIONS),
                            CalibrationConfig(), seed=seed)
        ck = {}
        reports[seed] = run_variants(ABLATION_VARIANTS, proto, {"main": desk_dataset}, cfg, checkpoints=ck)
        checkpoints.update({(name, seed): c for (name, _), c in ck.items()})
    return {"reports": reports, "checkpoints": checkpoints, "seconds": time.time() - t0}


# --------------------------------------------------------------------------- criteria

def test_01_loss_matches_brute_force():
    rng = np.random.default_rng(2024)
    t0 = time.time()
    worst = 0.0
    for _ in range(100):
        k, d = int(rng.integers(1, 17)), int(rng.integers(4, 65))
        tau = float(rng.choice([0.05, 0.1, 0.5]))
        zp, zq = rng.normal(size=(k, d)), rng.normal(size=(k, d))
        ref = [brute_pair_loss(zp.tolist(), zq.tolist(), j, tau) for j in range(k)]
        for j in range(k):
            worst = max(worst, abs(float(pair_loss(zp, zq, j, tau)) - ref[j]))
        worst = max(worst, abs(float(batch_loss(zp, zq, tau)) - sum(ref) / k))
    elapsed = time.time() - t0
    check(1, worst < 1e-10 and elapsed < 5, f"max deviation {worst:.2e} over 100 instances in {elapsed:.2f}s")


def test_02_loss_analytics():
    rng = np.random.default_rng(7)
    single = float(batch_loss(rng.normal(size=(1, 8)), rng.normal(size=(1, 8))))
    log_k = max(abs(float(batch_loss(np.tile(v, (k, 1)), np.tile(v, (k, 1)))) - math.log(k))
                for k in range(2, 17) for v in [rng.normal(size=12)])
    scale = 0.0
    for _ in range(50):
        k = int(rng.integers(1, 10))
        zp, zq = rng.normal(size=(k, 16)), rng.normal(size=(k, 16))
        a, b = rng.uniform(0.01, 100, size=(k, 1)), rng.uniform(0.01, 100, size=(k, 1))
        scale = max(scale, abs(float(batch_loss(zp, zq)) - float(batch_loss(a * zp, b * zq))))
    ok = single == 0.0 and log_k < 1e-6 and scale < 1e-9
    check(2, ok, f"K=1 loss {single}; |loss - log K| <= {log_k:.1e}; scale deviation {scale:.1e}")


def test_03_gradient_checks():
    t0 = time.time()
    worst = {"batch_loss": 0.0, "projection": 0.0, "estimator": 0.0}
    for seed in range(20):
        torch.manual_seed(seed)
        k = 2 + seed % 6
        z = torch.randn(2, k, 8, dtype=torch.float64)
        worst["batch_loss"] = max(worst["batch_loss"], fd_relative_error(lambda t: batch_loss(t[0], t[1]), z))
        head = ProjectionHead(32, ProjectionConfig(n_subjects=4, hidden_dim=32, embedding_dim=16)).double()
        est = GazeEstimator(32, EstimatorConfig(hidden_dim=32)).double()
        h = torch.randn(3, 32, dtype=torch.float64)
        worst["projection"] = max(worst["projection"], fd_relative_error(lambda t: head(t, seed % 4), h))
        worst["estimator"] = max(worst["estimator"], fd_relative_error(est, h))
    elapsed = time.time() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 30
    check(3, ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f" over 20 seeds in {elapsed:.1f}s")


def test_04_crop_containment(desk_dataset):
    samples = [desk_dataset[i] for i in range(0, 800, 8)]  # 100 samples, 1000 seeds each
    t0 = time.time()
    contained = sized = total = 0
    for s in samples:
        boxes = periocular_boxes(s)
        for seed in range(1000):
            out, win = gaze_crop(s, boxes, CropParams(), seed, return_window=True)
            contained += win.contains_box(boxes[0]) or win.contains_box(boxes[1])
            sized += out.shape == s.image.shape
            total += 1
    elapsed = time.time() - t0
    ok = total == 100_000 and contained == total and sized == total and elapsed < 60
    check(4, ok, f"{contained}/{total} windows contain a box, {sized}/{total} original size, {elapsed:.1f}s")


def test_05_augmentation_identities(desk_dataset):
    s = desk_dataset[3]
    crop = gaze_crop(s, periocular_boxes(s), CropParams(area_fraction_range=(1.0, 1.0)), seed=11)
    color = color_distort(s.image, ColorParams(0, 0, 0, 0, 0), seed=11)
    ok = np.array_equal(crop, s.image) and np.array_equal(color, s.image)
    check(5, ok, "full-area crop and zero-strength colour distortion are bit-identical")


def test_06_angular_error():
    oracle = 11.810668641654547  # arbitrary-precision dot product, frozen
    g = GazeDirection(0.2, -0.3)
    errs = [abs(angular_error(g, g)),
            abs(angular_error(GazeDirection(0, 0), GazeDirection(0, math.pi / 2)) - 90.0),
            abs(angular_error(GazeDirection(0.1, 0.2), GazeDirection(-0.1, 0.25)) - oracle)]
    rng = np.random.default_rng(5)
    pairs = [(GazeDirection(*a), GazeDirection(*b)) for a, b in
             zip(rng.uniform([-1.5, -3.1], [1.5, 3.1], (1000, 2)), rng.uniform([-1.5, -3.1], [1.5, 3.1], (1000, 2)))]
    symmetric = sum(angular_error(a, b) == angular_error(b, a) for a, b in pairs)
    ok = max(errs) < 1e-9 and symmetric == 1000
    check(6, ok, f"example deviations {[f'{e:.1e}' for e in errs]}; symmetric on {symmetric}/1000 pairs")


def test_07_desk_scale_learning(desk_dataset):
    t0 = time.time()
    ratios = []
    cfg_model = ModelConfig()
    for seed in range(3):
        ck = pretrain(desk_dataset, cfg_model, PretrainConfig(learning_rate=DESK_LR, n_iterations=DESK_ITERATIONS,
                                                              seed=seed))
        losses = np.array([row[2] for row in ck.loss_trace])  # (iteration, subject, loss)
        ratios.append(float(losses[-50:].mean() / losses[:50].mean()))
    elapsed = time.time() - t0
    ok = all(r <= 0.8 for r in ratios) and elapsed < 600
    check(7, ok, f"last/first-50 loss ratios {[round(r, 3) for r in ratios]} in {elapsed:.0f}s")


def test_08_ablation_ordering(ablation):
    per_seed = {v: [ablation["reports"][s][v].mean for s in ABLATION_SEEDS] for v in ABLATION_VARIANTS}
    mean = {v: float(np.mean(x)) for v, x in per_seed.items()}
    std = {v: float(np.std(x)) for v, x in per_seed.items()}

    def le(a, b):  # a <= b, ties within one std allowed
        return mean[a] <= mean[b] + max(std[a], std[b])

    strict = mean["ConGaze"] <= 0.9 * mean["RanNet"]
    chain = le("ConGaze", "ConEye") and le("ConEye", "SimCLR") and le("SimCLR", "RanNet")
    ok = strict and chain and ablation["seconds"] < 45 * 60
    detail = ", ".join(f"{v} {mean[v]:.2f}+-{std[v]:.2f}" for v in ABLATION_VARIANTS)
    check(8, ok, f"{detail} deg; ablation took {ablation['seconds'] / 60:.1f} min")


def test_09_head_only_keeps_extractor(ablation, desk_dataset):
    same = []
    for seed in ABLATION_SEEDS:
        ck = ablation["checkpoints"][("ConGaze_g", seed)]
        pool = list(desk_dataset.of_subjects([seed]))
        cal, _ = select_calibration_samples(pool, N_CALIBRATION, np.random.default_rng(seed))
        res = calibrate(ck, cal, CalibrationConfig(mode="head_only", n_samples=N_CALIBRATION))
        same.append(state_hash(res.model.extractor) == state_hash(ck.model.extractor))
    check(9, all(same), f"extractor bit-identical after head-only calibration on {sum(same)}/3 seeds")


def test_10_protocol_hygiene(ablation, desk_dataset):
    problems = []
    for seed in ABLATION_SEEDS:
        for rep in ablation["reports"][seed].values():
            problems += check_leakage(rep)
    six = generate_dataset(SynthDatasetSpec(n_subjects=6, images_per_subject=20, master_seed=31))
    tiny = HarnessConfig(ModelConfig(), PretrainConfig(batch_size=8, learning_rate=DESK_LR, n_iterations=2),
                         CalibrationConfig(epochs=1), seed=0)
    for kind in ("five_fold", "leave_one_subject_out"):
        problems += check_fold_partition(make_folds(six, kind), 6)
        reps = run_variants(["RanNet", "ConGaze", "STrain"], Protocol(kind, "m", "m", 5, 2), {"m": six}, tiny)
        for rep in reps.values():
            problems += check_leakage(rep)
    cross = run_variants(["ConGaze"], Protocol("cross_dataset", "a", "b", 5, 2), {"a": six, "b": desk_dataset},
                         tiny)
    problems += check_leakage(cross["ConGaze"])
    check(10, not problems, f"leakage checks over five_fold, LOSO, cross_dataset: {problems or 'clean'}")


def test_11_identity_dispersal(ablation, desk_dataset, tmp_path):
    scores = []
    for seed in ABLATION_SEEDS:
        pair = []
        for name in ("ConGaze", "SimCLR"):
            data = export_embedding_scatter(ablation["checkpoints"][(name, seed)], desk_dataset,
                                            tmp_path / f"{name}_{seed}.csv", seed=seed)
            pair.append(data.silhouette())
        scores.append(tuple(pair))
    ok = all(c < s for c, s in scores)
    check(11, ok, "silhouette ConGaze vs SimCLR per seed: " +
          ", ".join(f"{c:.3f} < {s:.3f}" for c, s in scores))


def test_12_attention_localisation(ablation, desk_dataset):
    wins = []
    for seed in ABLATION_SEEDS:  # each checkpoint on 20 images of its held-out subject
        ck = ablation["checkpoints"][("ConGaze", seed)]
        held_out = [s for s in desk_dataset if s.subject_index == seed][:20]
        heat = [region_heat(attention_map(ck, s, GRADCAM_LAYER), periocular_boxes(s)) for s in held_out]
        wins.append(sum(inside > outside for inside, outside in heat))
    check(12, all(w >= 14 for w in wins),
          f"periocular heat exceeds the rest on {wins} of 20 images per seed (layer {GRADCAM_LAYER})")


def _tree(root, names):
    return {n: (root / n).read_bytes() for n in names}


def test_13_determinism(tmp_path, desk_dataset):
    same = {}
    for run in ("a", "b"):
        assert cli_main(["synth", "--seed", "7", "--out", str(tmp_path / run / "data")]) == 0
        assert cli_main(["pretrain", "--data", str(tmp_path / run / "data"), "--iterations", "20", "--seed", "3",
                         "--out", str(tmp_path / run / "pre")]) == 0
    data_files = sorted(p.relative_to(tmp_path / "a" / "data").as_posix()
                        for p in (tmp_path / "a" / "data").rglob("*") if p.is_file() and p.name != "manifest.json")
    same["synth"] = _tree(tmp_path / "a" / "data", data_files) == _tree(tmp_path / "b" / "data", data_files)
    pre = ["checkpoint.pt", "checkpoint.json", "loss_trace.csv"]
    same["pretrain"] = _tree(tmp_path / "a" / "pre", pre) == _tree(tmp_path / "b" / "pre", pre)
    from congaze.nets import Checkpoint
    ck = Checkpoint.load(tmp_path / "a" / "pre" / "checkpoint.pt")
    for run in ("a", "b"):
        export_embedding_scatter(ck, desk_dataset, tmp_path / run / "tsne.csv", seed=0)
    same["scatter"] = _tree(tmp_path / "a", ["tsne.csv"]) == _tree(tmp_path / "b", ["tsne.csv"])
    check(13, all(same.values()), f"byte-identical reruns: {same} ({len(data_files)} dataset files)")


def test_14_reference_values_recorded():
    detail = ", ".join(f"{k} {v} deg" for k, v in REFERENCE_ERRORS.items())
    check(14, len(REFERENCE_ERRORS) == 5, f"documented, not asserted: {detail}")
