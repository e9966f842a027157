"""Command-line entry point: ``congaze {synth,pretrain,calibrate,evaluate,visualize}``.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .calibrate import calibrate, select_calibration_samples
from .datamodel import ValidationError
from .evalharness import (LAYOUTS, VARIANTS, HarnessConfig, check_leakage, get_variant, ingest_dataset,
                          run_variants, write_dataset, write_summary_csv)
from .nets import Checkpoint, valid_attention_layers
from .seeding import derive_seed
from .synthface import generate_dataset
from .train import TrainingDiverged, pretrain
from .viz import export_attention_maps, export_embedding_scatter, image_id

log = logging.getLogger("congaze")

DATA_ROOT_ENV = "CONGAZE_DATA_ROOT"
OUTPUT_ROOT_ENV = "CONGAZE_OUTPUT_ROOT"
EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _data_path(p) -> Path:
    p = Path(p)
    root = os.environ.get(DATA_ROOT_ENV)
    return Path(root) / p if root and not p.is_absolute() else p


def _out_path(p) -> Path:
    p = Path(p)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return Path(root) / p if root and not p.is_absolute() else p


def _load_data(section: dict):
    if not section.get("root"):
        raise ValidationError("config needs data.root (or pass --data)")
    return ingest_dataset(_data_path(section["root"]), section.get("layout", "generic_csv"))


def _cfg(args, command: str, overrides: dict | None = None) -> dict:
    return C.load_config(command, args.config, overrides)


# --------------------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    cfg = _cfg(args, "synth")
    if args.seed is not None:
        cfg["synth"]["master_seed"] = args.seed
    spec = C.synth_spec(cfg["synth"])
    if cfg["layout"] not in LAYOUTS:
        raise ValidationError(f"layout must be one of {LAYOUTS}")
    out = _out_path(args.out)
    manifest = C.RunManifest("synth", cfg, {"master_seed": spec.master_seed}, outputs={"root": str(out)})
    manifest.write(out / "manifest.json")
    ds = generate_dataset(spec)
    extra = {"spec": C._plain(spec), "appearances": [C._plain(a) for a in ds.meta["appearances"]]}
    write_dataset(ds, out, cfg["layout"], extra)
    manifest.finish(out / "manifest.json", images=len(ds))
    print(f"wrote {len(ds)} images for {ds.n_subjects} subjects to {out}")
    return EXIT_OK


def _write_trace(rows, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "subject_index", "loss"])
        for it, subj, loss in rows:
            w.writerow([it, subj, repr(float(loss))])


def cmd_pretrain(args) -> int:
    overrides = {}
    if args.data:
        overrides["data"] = {"root": args.data}
    cfg = _cfg(args, "pretrain", overrides)
    if args.iterations is not None:
        cfg["pretrain"]["n_iterations"] = args.iterations
    if args.seed is not None:
        cfg["pretrain"]["seed"] = args.seed
    pcfg = C.pretrain_config(cfg["pretrain"])
    mcfg = C.model_config(cfg["model"])
    ds = _load_data(cfg["data"])
    if mcfg.projection.n_subjects and mcfg.projection.n_subjects != ds.n_subjects:
        mcfg = C.model_config({**cfg["model"], "projection": {**cfg["model"]["projection"],
                                                              "n_subjects": ds.n_subjects}})
        cfg["model"] = mcfg.to_dict()
    if pcfg.augment.crop.constrained and any(s.landmarks is None for s in ds):
        raise ValidationError(f"gaze-specific cropping needs eye landmarks: "
                              f"{_data_path(cfg['data']['root']) / 'landmarks.csv'} is missing or incomplete")
    out = _out_path(args.out)
    ckpt_path = out / "checkpoint.pt"
    manifest = C.RunManifest("pretrain", cfg, {"training_seed": pcfg.seed},
                             inputs={"data": cfg["data"]["root"], "resume": args.resume})
    manifest.write(out / "manifest.json")
    resume = Checkpoint.load(args.resume) if args.resume else None
    every = args.checkpoint_every if args.checkpoint_every is not None else cfg["checkpoint_every"]
    ck = pretrain(ds, mcfg, pcfg, resume=resume, checkpoint_every=every,
                  on_checkpoint=lambda snap: snap.save(ckpt_path))
    ck.save(ckpt_path)
    _write_trace(ck.loss_trace, out / "loss_trace.csv")
    manifest.finish(out / "manifest.json", checkpoint=ckpt_path, loss_trace=out / "loss_trace.csv")
    print(f"checkpoint written to {ckpt_path}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    overrides = {}
    if args.data:
        overrides["data"] = {"root": args.data}
    cfg = _cfg(args, "calibrate", overrides)
    for key in ("mode", "n_samples", "epochs", "seed"):
        if getattr(args, key) is not None:
            cfg["calibration"][key] = getattr(args, key)
    ccfg = C.calibration_config(cfg["calibration"])
    ds = _load_data(cfg["data"])
    if cfg["subjects"]:
        unknown = [s for s in cfg["subjects"] if s not in ds.subject_ids]
        if unknown:
            raise ValidationError(f"unknown subjects {unknown}; dataset has {ds.subject_ids}")
        ds = ds.of_subjects([ds.subject_ids.index(s) for s in cfg["subjects"]])
    out = _out_path(args.out)
    manifest = C.RunManifest("calibrate", cfg, {"calibration_seed": ccfg.seed},
                             inputs={"checkpoint": args.checkpoint, "data": cfg["data"]["root"]})
    manifest.write(out / "manifest.json")
    ck = Checkpoint.load(args.checkpoint)
    chosen, _ = select_calibration_samples(list(ds), ccfg.n_samples,
                                           np.random.default_rng(derive_seed(ccfg.seed, "select")))
    result = calibrate(ck, chosen, ccfg)
    meta = {**ck.meta, "calibration": ccfg.to_dict(), "calibration_images": [image_id(ds, s) for s in chosen]}
    Checkpoint(result.model, meta).save(out / "calibrated.pt")
    result.write_record(out / "calibration.json")
    manifest.finish(out / "manifest.json", checkpoint=out / "calibrated.pt", record=out / "calibration.json")
    print(f"final train loss {result.epoch_losses[-1]:.4f}; model written to {out / 'calibrated.pt'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _cfg(args, "evaluate")
    if args.repeats is not None:
        cfg["protocol"]["n_repeats"] = args.repeats
    if args.variant:
        cfg["variants"] = list(VARIANTS) if args.variant == "all" else [args.variant]
    if args.seed is not None:
        cfg["seed"] = args.seed
    names = [get_variant(v).name for v in cfg["variants"]]
    proto = C.protocol(cfg["protocol"])
    datasets = {name: ingest_dataset(_data_path(d["root"]), d["layout"]) for name, d in cfg["datasets"].items()
                if name in (proto.pretrain_dataset, proto.eval_dataset)}
    for name, ds in datasets.items():
        ds.name = name
    hcfg = HarnessConfig(C.model_config(cfg["model"]), C.pretrain_config(cfg["pretrain"]),
                         C.calibration_config(cfg["calibration"]), int(cfg["seed"]))
    out = _out_path(args.out)
    manifest = C.RunManifest("evaluate", cfg, {"master_seed": hcfg.seed},
                             inputs={k: v["root"] for k, v in cfg["datasets"].items()})
    manifest.write(out / "manifest.json")
    reports = run_variants(names, proto, datasets, hcfg, jobs=args.jobs)
    outputs = {}
    for name, rep in reports.items():
        problems = check_leakage(rep)
        if problems:
            raise RuntimeError(f"{name}: protocol leakage detected: {problems}")
        outputs[name] = rep.write_json(out / f"report_{name}.json")
    summary = write_summary_csv(list(reports.values()), out / "summary.csv")
    manifest.finish(out / "manifest.json", summary=summary, **outputs)
    for name, rep in reports.items():
        print(f"{name:10s} {rep.mean:7.3f} +- {rep.std:.3f} deg")
    return EXIT_OK


def cmd_visualize(args) -> int:
    overrides = {}
    if args.data:
        overrides["data"] = {"root": args.data}
    cfg = _cfg(args, "visualize", overrides)
    if args.layers:
        try:
            cfg["gradcam"]["layers"] = [int(v) for v in args.layers.split(",")]
        except ValueError as e:
            raise ValidationError(f"--layers must be comma-separated integers, got {args.layers!r}") from e
    if args.perplexity is not None:
        cfg["tsne"]["perplexity"] = args.perplexity
    ds = _load_data(cfg["data"])
    ck = Checkpoint.load(args.checkpoint)
    out = _out_path(args.out)
    manifest = C.RunManifest("visualize", cfg, {"tsne_seed": cfg["tsne"]["seed"]},
                             inputs={"checkpoint": args.checkpoint, "data": cfg["data"]["root"]})
    manifest.write(out / "manifest.json")
    if args.mode == "tsne":
        t = cfg["tsne"]
        data = export_embedding_scatter(ck, ds, out / "tsne.csv", float(t["perplexity"]), int(t["max_iter"]),
                                        int(t["seed"]))
        manifest.finish(out / "manifest.json", csv=out / "tsne.csv", image=out / "tsne.png")
        print(f"t-SNE of {len(data.points)} samples, subject silhouette {data.silhouette():.3f}")
    else:
        g = cfg["gradcam"]
        layers = g["layers"] or list(valid_attention_layers(ck.model.cfg.backbone))
        samples = list(ds)[: int(g["n_images"])]
        written = export_attention_maps(ck, samples, layers, out / "gradcam",
                                        [image_id(ds, s) for s in samples], g["raw_format"])
        manifest.finish(out / "manifest.json", files=len(written))
        print(f"wrote {len(written)} files to {out / 'gradcam'}")
    return EXIT_OK


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="congaze", description="Gaze-aware contrastive pretraining and few-shot calibration.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, needs_out=True):
        sp.add_argument("--config", help="YAML config; omitted keys take defaults")
        sp.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
        if needs_out:
            sp.add_argument("--out", default="out", help="output directory")

    s = sub.add_parser("synth", help="render a synthetic face dataset")
    common(s)
    s.add_argument("--seed", type=int, help="override synth.master_seed")

    s = sub.add_parser("pretrain", help="contrastive pretraining")
    common(s)
    s.add_argument("--data", help="dataset root (overrides data.root)")
    s.add_argument("--iterations", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--checkpoint-every", type=int, help="save a resumable checkpoint every N iterations")

    s = sub.add_parser("calibrate", help="few-shot calibration of a checkpoint")
    common(s)
    s.add_argument("--checkpoint", required=False)
    s.add_argument("--data")
    s.add_argument("--mode", choices=["full_finetune", "head_only"])
    s.add_argument("--n-samples", dest="n_samples", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)

    s = sub.add_parser("evaluate", help="run a protocol for one or all variants")
    common(s)
    s.add_argument("--variant", help=f"one of {', '.join(VARIANTS)} or 'all'")
    s.add_argument("--repeats", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--jobs", type=int, default=1, help="worker processes for folds")

    s = sub.add_parser("visualize", help="t-SNE scatter or Grad-CAM exports")
    common(s)
    s.add_argument("--mode", choices=["tsne", "gradcam"], required=False)
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.add_argument("--layers", help="comma-separated conv layer indices, e.g. 9,13,17")
    s.add_argument("--perplexity", type=float)
    return p


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "calibrate": cmd_calibrate,
            "evaluate": cmd_evaluate, "visualize": cmd_visualize}
REQUIRED = {"calibrate": ("checkpoint",), "visualize": ("checkpoint", "mode")}


def main(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.print_config:
            print(C.dump_config(C.load_config(args.command, args.config)), end="")
            return EXIT_OK
        missing = [f"--{k.replace('_', '-')}" for k in REQUIRED.get(args.command, ()) if not getattr(args, k)]
        if missing:
            raise UsageError(f"{args.command}: missing required {', '.join(missing)}")
        if args.command == "evaluate" and args.variant and args.variant != "all":
            get_variant(args.variant)
        return COMMANDS[args.command](args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingDiverged, OSError, RuntimeError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
