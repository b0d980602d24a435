"""CLI subcommands: run, report, footprint, dynamics, gradcheck."""

import csv
import json

import numpy as np
import pytest

from protoreplay.cli import main


def run_config(tmp_path, **overrides):
    cfg = {
        "dataset": {"kind": "synthetic", "num_classes": 3, "dim": 8,
                    "per_class_train": 8, "per_class_test": 6,
                    "separation": 3.0, "seed": 1},
        "protocol": "incremental_class",
        "schedule": {"first_task_classes": 2, "classes_per_task": 1,
                     "quota": 8},
        "architecture": "synthetic_vector",
        "latent_dim": 4,
        "samples": 5,
        "learning_rate": 0.05,
        "epochs_per_task": 3,
        "batch_per_class": 6,
        "per_class_quota": 4,
        "seed": 0,
    }
    cfg.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def test_footprint_prints_table_numbers(capsys):
    assert main(["footprint", "--arch", "cifar_like_32", "--mode", "ours",
                 "--latent-dim", "500", "--exemplars", "10"]) == 0
    out = capsys.readouterr().out
    assert "network parameters: 2,126,500" in out
    assert "exemplar elements: 30,720" in out
    assert "prototype elements: 10,000" in out
    assert "total: 2,167,220" in out


def test_footprint_baseline_modes(capsys):
    assert main(["footprint", "--arch", "cifar_like_32", "--mode",
                 "baseline_sgd", "--latent-dim", "500"]) == 0
    assert "network parameters: 1,631,500" in capsys.readouterr().out
    assert main(["footprint", "--arch", "cifar_like_32", "--mode",
                 "baseline_regularizer", "--latent-dim", "500"]) == 0
    out = capsys.readouterr().out
    assert "regularizer parameters: 1,631,500" in out
    assert "total: 3,263,000" in out


def test_run_writes_artifacts_and_is_reproducible(tmp_path, capsys):
    cfg = run_config(tmp_path)
    out1, out2 = tmp_path / "run1", tmp_path / "run2"
    assert main(["run", "--config", str(cfg), "--out", str(out1)]) == 0
    assert main(["run", "--config", str(cfg), "--out", str(out2)]) == 0
    for name in ["accuracy.csv", "manifest.json", "prototype_history.csv",
                 "task1_latents.csv", "encoder.npz", "memory.bin"]:
        assert (out1 / name).exists()
    assert (out1 / "accuracy.csv").read_bytes() == (out2 / "accuracy.csv").read_bytes()
    assert (out1 / "prototype_history.csv").read_bytes() == \
        (out2 / "prototype_history.csv").read_bytes()
    manifest = json.loads((out1 / "manifest.json").read_text())
    assert manifest["seed"] == 0
    assert 0.0 <= manifest["final_average_accuracy"] <= 1.0
    assert manifest["footprint"]["network_params"] > 0


def test_report_fixture_average(tmp_path, capsys):
    path = tmp_path / "acc.csv"
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["task_1", "task_2"])
        writer.writerow(["1.0"])
        writer.writerow(["0.5", "1.0"])
    assert main(["report", "--matrix", str(path)]) == 0
    out = capsys.readouterr().out
    assert "final average accuracy: 0.7500" in out
    assert "forgetting on task 1: 0.5000" in out


def test_dynamics_on_generated_history(tmp_path, capsys):
    cfg = run_config(tmp_path)
    run_out = tmp_path / "run"
    assert main(["run", "--config", str(cfg), "--out", str(run_out)]) == 0
    sim = tmp_path / "similarity.csv"
    with open(sim, "w", newline="") as f:
        writer = csv.writer(f)
        for row in np.eye(3):
            writer.writerow([repr(float(v)) for v in row])
    dyn_out = tmp_path / "dyn"
    assert main(["dynamics", "--history", str(run_out / "prototype_history.csv"),
                 "--basis", str(run_out / "task1_latents.csv"),
                 "--similarity", str(sim), "--out", str(dyn_out)]) == 0
    out = capsys.readouterr().out
    assert "pearson r" in out
    with open(dyn_out / "trajectories.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["class_id", "task_id", "pc1", "pc2", "pc3"]
    assert len(rows) > 1
    assert (dyn_out / "motion_distances.csv").exists()


def test_gradcheck_exits_zero(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "all gradient checks passed" in out
    assert "FAIL" not in out


def test_malformed_config_exits_two(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "malformed JSON" in capsys.readouterr().err


def test_missing_config_exits_two(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "nope.json"),
                 "--out", str(tmp_path / "o")]) == 2
    assert "error" in capsys.readouterr().err


def test_unknown_dataset_kind_exits_two(tmp_path, capsys):
    cfg = run_config(tmp_path, dataset={"kind": "tfrecord"})
    assert main(["run", "--config", str(cfg), "--out",
                 str(tmp_path / "o")]) == 2
    assert "unknown dataset kind" in capsys.readouterr().err
