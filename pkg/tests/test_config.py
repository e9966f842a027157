import json

import pytest
import yaml

from congaze import config as C
from congaze.datamodel import ValidationError


def test_defaults_cover_every_command():
    for cmd in ("synth", "pretrain", "calibrate", "evaluate", "visualize"):
        assert isinstance(C.defaults(cmd), dict)
    with pytest.raises(ValidationError):
        C.defaults("train")


def test_yaml_merges_over_defaults(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("pretrain:\n  n_iterations: 7\n  augment:\n    crop:\n      margin: 0.1\n")
    cfg = C.load_config("pretrain", str(p))
    assert cfg["pretrain"]["n_iterations"] == 7
    assert cfg["pretrain"]["augment"]["crop"]["margin"] == 0.1
    assert cfg["pretrain"]["batch_size"] == 64
    assert C.pretrain_config(cfg["pretrain"]).augment.crop.margin == 0.1


def test_unknown_key_rejected(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("pretrain:\n  n_iters: 7\n")
    with pytest.raises(ValidationError, match="pretrain.n_iters"):
        C.load_config("pretrain", str(p))


def test_bad_files(tmp_path):
    with pytest.raises(ValidationError, match="not found"):
        C.load_config("synth", str(tmp_path / "none.yaml"))
    p = tmp_path / "list.yaml"
    p.write_text("- 1\n- 2\n")
    with pytest.raises(ValidationError, match="mapping"):
        C.load_config("synth", str(p))


def test_named_datasets_section(tmp_path):
    p = tmp_path / "e.yaml"
    p.write_text("datasets:\n  src: {root: a}\n  dst: {root: b, layout: synthetic}\n")
    cfg = C.load_config("evaluate", str(p))
    assert cfg["datasets"]["dst"] == {"root": "b", "layout": "synthetic"}
    assert cfg["datasets"]["src"]["layout"] == "generic_csv"


def test_dump_round_trip():
    cfg = C.load_config("evaluate")
    assert yaml.safe_load(C.dump_config(cfg)) == cfg


def test_hash_ignores_key_order():
    a = {"x": 1, "y": {"b": 2, "a": [1, 2]}}
    b = {"y": {"a": [1, 2], "b": 2}, "x": 1}
    assert C.hash_config(a) == C.hash_config(b) != C.hash_config({"x": 2, "y": a["y"]})


def test_builders_report_bad_sections():
    with pytest.raises(ValidationError):
        C.synth_spec({"n_subjects": 1})
    with pytest.raises(ValidationError, match="bad calibration section"):
        C.calibration_config({"epoch": 3})
    proto = C.protocol({"kind": "five_fold", "pretrain_dataset": "m", "eval_dataset": "m", "folds": [0, 2]})
    assert proto.folds == (0, 2)


def test_manifest(tmp_path):
    m = C.RunManifest("synth", {"a": 1}, {"master_seed": 3})
    m.write(tmp_path / "m.json")
    d = json.loads((tmp_path / "m.json").read_text())
    assert d["status"] == "running" and d["config_hash"] == C.hash_config({"a": 1})
    m.finish(tmp_path / "m.json", images=5)
    d = json.loads((tmp_path / "m.json").read_text())
    assert d["status"] == "ok" and d["outputs"] == {"images": "5"} and d["finished"]
