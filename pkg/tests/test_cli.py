import csv
import json

import numpy as np
import pytest

from cfisac.cli import main
from cfisac.model import unet_spec
from cfisac.persistence import (RunConfig, dump_config, load_checkpoint, load_dataset, parse_config,
                                read_manifest)
from cfisac.scenario import SystemConfig, generate_dataset
from cfisac.training import TrainConfig, TrainingRecord

TOY = RunConfig(SystemConfig(num_aps=2, antennas_per_ap=4, num_ues=2),
                TrainConfig(batch_size=16),
                unet_spec(channels=(4, 8), decoder_channels=(8, 4)))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "toy.json"
    cfg.write_text(dump_config(TOY))
    assert main(["gen-data", "--config", str(cfg), "--size", "40", "--train-fraction", "0.75",
                 "--seed", "2", "--out", str(root / "data")]) == 0
    data = root / "data" / "dataset.json"
    for role in ("ssnr-teacher", "sinr-teacher"):
        assert main(["train", "--dataset", str(data), "--role", role, "--config", str(cfg),
                     "--epochs", "2", "--out", str(root / role)]) == 0
    return root, cfg, data


def test_config_round_trip():
    assert parse_config(dump_config(TOY)) == TOY
    assert RunConfig.from_dict({"arch": "CNN1D"}).arch.kind == "CNN1D"


def test_gen_data_default_split(tmp_path):
    assert main(["gen-data", "--size", "20000", "--out", str(tmp_path)]) == 0
    ds = load_dataset(tmp_path / "dataset.json")
    assert (ds.split, len(ds) - ds.split) == (19400, 600)
    assert read_manifest(tmp_path)["seeds"] == {"data": 0}


def test_gen_data_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-data", "--size", "50", "--seed", "5", "--out", str(tmp_path / name)]) == 0
    a = (tmp_path / "a" / "dataset.json").read_bytes()
    assert a == (tmp_path / "b" / "dataset.json").read_bytes()
    ds = load_dataset(tmp_path / "a" / "dataset.json")
    ref = generate_dataset(SystemConfig(), 50, seed=5)
    np.testing.assert_array_equal(ds.ue_xy, ref.ue_xy)
    np.testing.assert_array_equal(ds.target_xy, ref.target_xy)


def test_gen_data_rejects_empty(tmp_path, capsys):
    assert main(["gen-data", "--size", "0", "--out", str(tmp_path)]) == 2
    assert "size" in capsys.readouterr().err


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("CFISAC_OUTPUT_ROOT", str(tmp_path))
    assert main(["gen-data", "--size", "3"]) == 0
    assert (tmp_path / "gen-data" / "dataset.json").exists()


def test_student_needs_teachers(workspace, tmp_path, capsys):
    _, cfg, data = workspace
    code = main(["train", "--dataset", str(data), "--role", "student", "--config", str(cfg),
                 "--epochs", "1", "--out", str(tmp_path)])
    assert code == 2
    err = capsys.readouterr().err
    assert "--ssnr-teacher" in err and "--sinr-teacher" in err


def test_teacher_outputs(workspace):
    root, _, data = workspace
    out = root / "ssnr-teacher"
    rec = TrainingRecord.from_csv((out / "curves.csv").read_text())
    assert len(rec) == 2
    model, meta = load_checkpoint(out / "checkpoint.pt", TOY.system)
    assert meta["role"] == "ssnr-teacher" and meta["epoch"] in (1, 2)
    man = read_manifest(out)
    assert man["inputs"]["dataset_sha256"] and man["seeds"]["init"] == 0
    assert not (out / "lambda_steps.csv").exists()


def test_student_and_evaluate(workspace):
    root, cfg, data = workspace
    out = root / "student"
    assert main(["train", "--dataset", str(data), "--role", "student", "--config", str(cfg), "--epochs", "2",
                 "--ssnr-teacher", str(root / "ssnr-teacher" / "checkpoint.pt"),
                 "--sinr-teacher", str(root / "sinr-teacher" / "checkpoint.pt"), "--out", str(out)]) == 0
    steps = list(csv.DictReader((out / "lambda_steps.csv").open()))
    assert len(steps) == 2 * 2  # 30 training scenes, batches of 16
    assert all(0.0 <= float(r["lambda"]) <= 1.0 for r in steps)
    assert read_manifest(out)["ceilings"]["g1_max"] > 0

    ev = root / "eval"
    assert main(["evaluate", "--checkpoint", str(out / "checkpoint.pt"), "--dataset", str(data),
                 "--curves", str(out / "curves.csv"), "--out", str(ev)]) == 0
    summary = json.loads((ev / "summary.json").read_text())
    assert summary["n"] == 10 and summary["selected_epoch"] in (1, 2)
    assert summary["ssnr_upper_bound"] == pytest.approx(2 * 0.1 * 4 * 2 / (2 * 1.0))
    rows = list(csv.DictReader((ev / "metrics.csv").open()))
    assert len(rows) == 10
    assert np.mean([float(r["ssnr"]) for r in rows]) == pytest.approx(summary["mean_g1"])


def test_ceilings_command(workspace):
    root, _, data = workspace
    assert main(["ceilings", "--dataset", str(data), "--ssnr-teacher", str(root / "ssnr-teacher" / "checkpoint.pt"),
                 "--sinr-teacher", str(root / "sinr-teacher" / "checkpoint.pt"), "--out", str(root / "c")]) == 0
    c = json.loads((root / "c" / "ceilings.json").read_text())
    assert c["g1_max"] > 0 and c["g2_max"] > 0


def test_checkpoint_dataset_mismatch(workspace, tmp_path):
    root, _, _ = workspace
    assert main(["gen-data", "--size", "5", "--out", str(tmp_path)]) == 0
    code = main(["evaluate", "--checkpoint", str(root / "ssnr-teacher" / "checkpoint.pt"),
                 "--dataset", str(tmp_path / "dataset.json"), "--out", str(tmp_path / "e")])
    assert code == 3


def test_rerun_from_manifest_is_identical(workspace, tmp_path):
    root, _, _ = workspace
    assert main(["train", "--from-manifest", str(root / "sinr-teacher"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "curves.csv").read_bytes() == (root / "sinr-teacher" / "curves.csv").read_bytes()


def test_benchmark_command(workspace, tmp_path):
    root, _, data = workspace
    assert main(["benchmark", "--dataset", str(data), "--checkpoint", str(root / "ssnr-teacher" / "checkpoint.pt"),
                 "--n-points", "2", "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["baseline_label"] == "surrogate-CVX" and summary["n_points"] == 2
    assert len((tmp_path / "comparison.csv").read_text().splitlines()) == 5


def test_missing_file(tmp_path):
    assert main(["evaluate", "--checkpoint", str(tmp_path / "nope.pt"),
                 "--dataset", str(tmp_path / "nope.json")]) == 2
