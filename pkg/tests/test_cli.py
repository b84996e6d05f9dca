import csv
import math
import subprocess
import sys

import pytest

from manetlab.cli import main
from manetlab.config import RunConfig, read_config_file
from manetlab.datagen import load_dataset

TINY = ["--set", "num_ids=8", "--set", "images_per_id=4", "--set", "holdout_per_id=1",
        "--set", "batch_size=16", "--set", "batch_ids=8", "--set", "warmup_epochs=0"]


def _csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["datagen", "--seed", "3", "--out", str(out)] + TINY) == 0
    return out


def test_datagen_writes_manifest_and_config(tiny_data):
    assert (tiny_data / "manifest.jsonl").exists()
    ds = load_dataset(tiny_data)
    assert ds.num_ids == 8 and len(ds) == 32
    resolved = read_config_file(tiny_data / "config.resolved")
    assert resolved["data_seed"] == 3 and resolved["num_ids"] == 8


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main([]) == 2
    assert main(["bogus"]) == 2
    assert main(["gradcheck", "--select", "not_an_op"]) == 2
    assert "unknown selector" in capsys.readouterr().err
    assert main(["train", "--out", str(tmp_path), "--set", "no_such_key=1"]) == 2
    assert main(["train", "--out", str(tmp_path), "--set", "epochs=many"]) == 2
    assert main(["ablate", "--out", str(tmp_path), "--variants", "baseline,nope"]) == 2
    assert main(["sweep-k", "--out", str(tmp_path), "--values", "0,2"]) == 2
    assert main(["sweep-k", "--out", str(tmp_path), "--values", "x"]) == 2


def test_help_exits_0():
    assert main(["--help"]) == 0


def test_gradcheck_selector_and_report(tmp_path, capsys):
    assert main(["gradcheck", "--select", "rgl", "--out", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2 and all(l.startswith("PASS") for l in lines)
    assert (tmp_path / "gradcheck.txt").read_text().splitlines() == lines
    assert (tmp_path / "config.resolved").exists()


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "manetlab", "gradcheck", "--select", "losses"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.count("PASS") == 3


def test_missing_dataset_exits_1(tmp_path):
    assert main(["train", "--data", str(tmp_path / "absent"), "--out", str(tmp_path / "o")]) == 1


@pytest.fixture(scope="module")
def trained(tiny_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    args = ["train", "--data", str(tiny_data), "--out", str(out), "--seed", "0", "--set", "epochs=15"] + TINY
    assert main(args) == 0
    return out


def test_train_outputs(trained, tiny_data):
    rows = _csv(trained / "metrics.csv")
    assert rows[0] == "epoch,lr,loss_id,loss_rank,loss_cons,loss_total,r1,r5,r10".split(",")
    assert len(rows) == 16
    assert (trained / "best.ckpt").exists() and (trained / "last.ckpt").exists()
    resolved = read_config_file(trained / "config.resolved")
    assert resolved["epochs"] == 15 and resolved["data_seed"] == 3 and resolved["num_ids"] == 8
    assert set(resolved) == set(RunConfig().flat())


def test_eval_trained_checkpoint(trained, tiny_data, tmp_path):
    out_test, out_train = tmp_path / "test", tmp_path / "train"
    ckpt = str(trained / "last.ckpt")
    assert main(["eval", "--checkpoint", ckpt, "--data", str(tiny_data), "--out", str(out_test)]) == 0
    assert main(["eval", "--checkpoint", ckpt, "--data", str(tiny_data), "--split", "train",
                 "--out", str(out_train)]) == 0
    header, test_row = _csv(out_test / "metrics.csv")
    assert header == ["split", "r1", "r5", "r10"]
    values = [float(v) for v in test_row[1:]]
    assert all(0 <= v <= 1 for v in values)
    train_row = _csv(out_train / "metrics.csv")[1]
    # a model fitted to the training images retrieves them at least as well as unseen ones
    assert float(train_row[1]) >= float(test_row[1])
    assert (out_test / "embeddings.arc").exists() and (out_test / "config.resolved").exists()


def test_eval_incompatible_checkpoint_exits_1(trained, tiny_data, tmp_path):
    args = ["eval", "--checkpoint", str(trained / "last.ckpt"), "--data", str(tiny_data),
            "--out", str(tmp_path), "--set", "num_centers=3"]
    assert main(args) == 1


def test_eval_untrained_model_is_at_chance(tmp_path):
    data, run, ev = tmp_path / "data", tmp_path / "run", tmp_path / "eval"
    assert main(["datagen", "--seed", "11", "--out", str(data)]) == 0
    assert main(["train", "--data", str(data), "--out", str(run), "--set", "epochs=0"]) == 0
    assert main(["eval", "--checkpoint", str(run / "last.ckpt"), "--data", str(data), "--out", str(ev)]) == 0
    r1 = float(_csv(ev / "metrics.csv")[1][1])
    # 64 queries, 2 of 64 gallery images share the query identity
    p, n = 1 / 32, 64
    assert abs(r1 - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_ablate_csv(tiny_data, tmp_path):
    args = ["ablate", "--data", str(tiny_data), "--out", str(tmp_path), "--variants", "baseline,full",
            "--seeds", "0", "--set", "epochs=1"] + TINY
    assert main(args) == 0
    rows = _csv(tmp_path / "results.csv")
    assert rows[0] == ["variant", "seed", "r1", "r5", "r10", "params"]
    assert [r[0] for r in rows[1:]] == ["baseline", "full"]
    assert (tmp_path / "config.resolved").exists()


def _sweep(tiny_data, out, values):
    args = ["sweep-k", "--data", str(tiny_data), "--out", str(out), "--values", values,
            "--set", "epochs=1"] + TINY
    assert main(args) == 0
    return _csv(out / "sweep_k.csv")


def test_sweep_k_single_value(tiny_data, tmp_path):
    rows = _sweep(tiny_data, tmp_path, "1")
    assert rows[0] == ["k", "r1"] and len(rows) == 2 and rows[1][0] == "1"
    svg = (tmp_path / "sweep_k.svg").read_text()
    assert svg.startswith("<svg") and "<polyline" in svg


def test_sweep_k_ordering_and_determinism(tiny_data, tmp_path):
    first = _sweep(tiny_data, tmp_path / "a", "8,2,6,4")
    assert [r[0] for r in first[1:]] == ["2", "4", "6", "8"]
    second = _sweep(tiny_data, tmp_path / "b", "8,2,6,4")
    assert first == second
    assert (tmp_path / "a" / "sweep_k.svg").read_text() == (tmp_path / "b" / "sweep_k.svg").read_text()


def test_console_script_reports_usage_exit_code():
    proc = subprocess.run(["manetlab", "gradcheck", "--select", "nope"], capture_output=True, text=True)
    assert proc.returncode == 2
