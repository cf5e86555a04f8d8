import json
import os
import subprocess
import sys
from importlib import resources

import numpy as np
import pytest
from jsonschema import validate

from grcseg.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, build_parser, main, sub_seed
from grcseg.lidar_io import read_scan
from grcseg.rng import STREAM_SCENE

SCENES = {"version": 1, "n_classes": 4, "extent": 10.0, "seed": 3,
          "sensor": {"beams": 16, "azimuth_steps": 256, "fov_up": 3.0, "fov_down": -25.0}}
TRAIN = {"version": 1, "seed": 0,
         "model": {"n_classes": 4, "voxel_size": 0.5, "range_h": 8, "range_w": 64,
                   "geo_channels": [3, 4, 8], "geo_strides": [1, 2], "ref_channels": [2, 4, 8],
                   "ref_strides": [2, 1], "n_queries": 2, "heads": 2, "decoder_hidden": 8},
         "train": {"steps": 2, "max_lr": 0.05, "accum_steps": 1, "augment": False}}


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = write_json(root / "scenes.json", SCENES)
    cfg = write_json(root / "train.json", TRAIN)
    assert main(["gen", "--spec", spec, "--count", "2", "--out", str(root / "data")]) == EXIT_OK
    assert main(["train", "--config", cfg, "--data", str(root / "data"), "--out", str(root / "run")]) == EXIT_OK
    return root


# -------------------------------------------------------------------- gen

def test_gen_writes_scans_and_manifest(work):
    data = work / "data"
    man = json.loads((data / "manifest.json").read_text())
    assert man["count"] == 2 and man["seed"] == 3 and len(man["files"]) == 2
    cloud = read_scan(data / "000000.bin", data / "000000.label")
    assert len(cloud) == man["files"][0]["points"]
    assert cloud.labels.max() < 4
    assert man["files"][1]["scene_seed"] == sub_seed(3, STREAM_SCENE, 1, 1)


def test_gen_deterministic(work, tmp_path):
    spec = str(work / "scenes.json")
    main(["gen", "--spec", spec, "--count", "2", "--out", str(tmp_path / "a")])
    for name in ("000000.bin", "000001.label", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (work / "data" / name).read_bytes()


def test_gen_seed_override_changes_data(work, tmp_path):
    main(["gen", "--spec", str(work / "scenes.json"), "--count", "1", "--out", str(tmp_path), "--seed", "4"])
    assert (tmp_path / "000000.bin").read_bytes() != (work / "data" / "000000.bin").read_bytes()


def test_gen_zero_count(tmp_path):
    assert main(["gen", "--count", "0", "--out", str(tmp_path)]) == EXIT_OK
    assert os.listdir(tmp_path) == ["manifest.json"]


def test_gen_rejects_unknown_spec_key(tmp_path):
    spec = write_json(tmp_path / "s.json", {**SCENES, "colour": 1})
    assert main(["gen", "--spec", spec, "--count", "1", "--out", str(tmp_path / "o")]) == EXIT_USAGE


def test_sub_seed_streams_differ():
    assert sub_seed(0, 1, 1, 0) != sub_seed(0, 1, 1, 1)
    assert sub_seed(0, 1, 1, 0) == sub_seed(0, 1, 1, 0)


# ------------------------------------------------------------------ train

def test_train_outputs(work):
    run = work / "run"
    assert {"model.grcw", "model.grcw.json", "metrics.csv", "train.log"} <= set(os.listdir(run))
    rows = (run / "metrics.csv").read_text().strip().splitlines()
    assert len(rows) == 3
    assert "training ablation=full" in (run / "train.log").read_text()


def test_train_missing_data_dir(work, tmp_path):
    out = tmp_path / "run"
    code = main(["train", "--config", str(work / "train.json"), "--data", str(tmp_path / "nope"), "--out", str(out)])
    assert code == EXIT_DATA and not out.exists()


def test_train_unknown_config_key(work, tmp_path):
    cfg = write_json(tmp_path / "c.json", {**TRAIN, "train": {**TRAIN["train"], "lr": 1.0}})
    assert main(["train", "--config", cfg, "--data", str(work / "data"), "--out", str(tmp_path / "r")]) == EXIT_USAGE


def test_train_label_out_of_range(work, tmp_path):
    cfg = write_json(tmp_path / "c.json", {**TRAIN, "model": {**TRAIN["model"], "n_classes": 2}})
    assert main(["train", "--config", cfg, "--data", str(work / "data"), "--out", str(tmp_path / "r")]) == EXIT_DATA


def test_train_missing_label_file(work, tmp_path):
    data = tmp_path / "d"
    data.mkdir()
    (data / "x.bin").write_bytes((work / "data" / "000000.bin").read_bytes())
    assert main(["train", "--config", str(work / "train.json"), "--data", str(data),
                 "--out", str(tmp_path / "r")]) == EXIT_DATA


# ------------------------------------------------------------------- eval

def test_eval_report_matches_schema(work, tmp_path, capsys):
    report = tmp_path / "r.json"
    code = main(["eval", "--checkpoint", str(work / "run" / "model.grcw"), "--data", str(work / "data"),
                 "--report", str(report)])
    assert code == EXIT_OK
    doc = json.loads(report.read_text())
    schema = json.loads(resources.files("grcseg").joinpath("data", "report_schema.json").read_text())
    validate(doc, schema)
    assert doc["order"] == ["D-fog", "L-fog", "Rain", "Snow", "All"]
    table = capsys.readouterr().out
    assert table.splitlines()[0].split()[1:] == doc["order"]
    for col in doc["columns"].values():
        assert 0 <= col["miou"] <= 1


def test_eval_clean_json(work, capsys):
    code = main(["eval", "--checkpoint", str(work / "run" / "model.grcw"), "--data", str(work / "data"),
                 "--preset", "none", "--json"])
    assert code == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["order"] == ["Clean"] and doc["columns"]["Clean"]["points"] > 0


def test_eval_deterministic(work, capsys):
    args = ["eval", "--checkpoint", str(work / "run" / "model.grcw"), "--data", str(work / "data"),
            "--preset", "rain", "--json"]
    main(args)
    a = capsys.readouterr().out
    main(args)
    assert capsys.readouterr().out == a


def test_eval_bad_preset(work):
    assert main(["eval", "--checkpoint", str(work / "run" / "model.grcw"), "--data", str(work / "data"),
                 "--preset", "hail"]) == EXIT_USAGE


def test_eval_missing_checkpoint(work, tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "m.grcw"), "--data", str(work / "data")]) == EXIT_DATA


def test_eval_class_mismatch(work, tmp_path):
    data = tmp_path / "d"
    main(["gen", "--spec", write_json(tmp_path / "s.json", {**SCENES, "n_classes": 6}), "--count", "1",
          "--out", str(data), "--seed", "1"])
    labels = read_scan(data / "000000.bin", data / "000000.label").labels
    if labels.max() < 4:
        pytest.skip("scene drew no class above the model's range")
    assert main(["eval", "--checkpoint", str(work / "run" / "model.grcw"), "--data", str(data)]) == EXIT_DATA


# ---------------------------------------------------------------- inspect

def test_inspect_outputs_and_shift(work, tmp_path):
    out = tmp_path / "o"
    code = main(["inspect", "--scan", str(work / "data" / "000000.bin"), "--out", str(out),
                 "--preset", "fog_dense", "--height", "16", "--width", "256"])
    assert code == EXIT_OK
    names = set(os.listdir(out))
    assert {"distance_hist.csv", "reflectance_hist.csv", "reflectance.pgm", "shift_fog_dense.json",
            "distance_hist_fog_dense.csv", "reflectance_hist_fog_dense.csv"} <= names
    shift = json.loads((out / "shift_fog_dense.json").read_text())
    assert shift["reflectance_shift"] > shift["distance_shift"]
    counts = np.loadtxt(out / "distance_hist.csv", delimiter=",", skiprows=1)[:, 2]
    assert counts.sum() == len(read_scan(work / "data" / "000000.bin"))


def test_inspect_truncated_scan(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"\0" * 18)
    assert main(["inspect", "--scan", str(bad), "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_inspect_missing_scan(tmp_path):
    assert main(["inspect", "--scan", str(tmp_path / "none.bin"), "--out", str(tmp_path / "o")]) == EXIT_DATA


# ------------------------------------------------------------------ usage

def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["gen", "--count", "1", "--out", "x", "--colour", "red"])
    assert exc.value.code == EXIT_USAGE


def test_abbreviated_flag_rejected():
    with pytest.raises(SystemExit) as exc:
        main(["gen", "--cou", "1", "--out", "x"])
    assert exc.value.code == EXIT_USAGE


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for cmd in ("gen", "train", "eval", "verify", "inspect"):
        assert cmd in out


def test_verify_projection_suite(capsys):
    assert main(["verify", "--suite", "projection"]) == EXIT_OK
    assert "checks passed" in capsys.readouterr().out


def test_console_script_runs(tmp_path):
    pts = np.array([[5.0, 0, -1, 0.3], [6.0, 1, -1, 0.6]], np.float32)
    (tmp_path / "s.bin").write_bytes(pts.tobytes())
    res = subprocess.run([sys.executable, "-m", "grcseg.cli", "inspect", "--scan", str(tmp_path / "s.bin"),
                          "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert "2 points" in res.stdout
