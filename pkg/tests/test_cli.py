import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from cmaformer import cli
from cmaformer.errors import TrainingError

TINY_YAML = """\
model:
  img_size: 32
  patch_size: 2
  stage_widths: [8, 16]
  depths: [1, 1]
  heads: [2, 2]
  stem_width: 4
  rates: [1, 2]
run:
  epochs: 1
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--n", "20", "--size", "32", "--seed", "7", "--out", str(root / "data")]) == 0
    (root / "tiny.yaml").write_text(TINY_YAML)
    return root


def read_metrics(path):
    return [json.loads(line) for line in open(path)]


def test_synth_prints_stable_hash(workspace, tmp_path, capsys):
    cli.main(["synth", "--n", "20", "--size", "32", "--seed", "7", "--out", str(tmp_path / "again")])
    first = json.load(open(workspace / "data" / "manifest.json"))["hash"]
    assert f"manifest hash {first}" in capsys.readouterr().out
    assert len(list((workspace / "data" / "images").glob("*.png"))) == 20


def test_usage_errors(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["synth"])
    assert info.value.code == 2
    assert "--n" in capsys.readouterr().err
    assert cli.main(["synth", "--n", "5"]) == 2
    assert "--n" in capsys.readouterr().err


def test_train_outputs_and_determinism(workspace):
    runs = []
    for k in range(2):
        out = workspace / f"run{k}"
        args = ["train", "--config", str(workspace / "tiny.yaml"), "--data", str(workspace / "data"),
                "--out", str(out), "--seed", "3", "--labeled-fraction", "0.5", "--eval-every", "1"]
        assert cli.main(args) == 0
        runs.append(out)
    for name in ("checkpoint.npz", "config.yaml", "metrics.jsonl", "eval_val.csv", "eval_train.csv",
                 "val_curve.csv", "loss.png", "dice.png"):
        assert (runs[0] / name).is_file()
    a, b = (read_metrics(r / "metrics.jsonl") for r in runs)
    assert len(a) == 2  # 8 labeled images, batch size 4
    for r in a + b:
        r.pop("wall_time")
    assert a == b
    assert (runs[0] / "eval_val.csv").read_bytes() == (runs[1] / "eval_val.csv").read_bytes()
    assert {"step", "lr", "loss_total", "loss_sup", "loss_contrast", "loss_con"} <= set(a[0])
    assert a[0]["lr"] == 0.001 and a[0]["momentum"] == 0.99 and a[0]["weight_decay"] == 3e-5
    header = next(csv.reader(open(runs[0] / "eval_val.csv")))
    assert header == ["class", "dice"]


def test_ablate_no_ldc_forces_gamma_zero(workspace, capsys):
    out = workspace / "noldc"
    args = ["train", "--config", str(workspace / "tiny.yaml"), "--data", str(workspace / "data"),
            "--out", str(out), "--labeled-fraction", "0.5", "--ablate-no-ldc"]
    assert cli.main(args) == 0
    assert "gamma_con=0.0" in capsys.readouterr().out
    assert all(r["gamma_con"] == 0.0 and r["loss_con"] == 0.0 for r in read_metrics(out / "metrics.jsonl"))
    assert "ldc_loss: false" in (out / "config.yaml").read_text()


def test_eval_outputs(workspace, capsys):
    ck = workspace / "run0" / "checkpoint.npz"
    outs = []
    for k in range(2):
        out = workspace / f"eval{k}"
        assert cli.main(["eval", "--checkpoint", str(ck), "--data", str(workspace / "data"), "--split", "train",
                         "--overlays", "2", "--stack", "--out", str(out)]) == 0
        outs.append(out)
    assert (outs[0] / "eval_train.csv").read_bytes() == (outs[1] / "eval_train.csv").read_bytes()
    assert len(list((outs[0] / "overlays").glob("*.png"))) == 2
    stack = np.load(outs[0] / "stack_train.npy")
    assert stack.shape == (16, 32, 32) and stack.dtype == np.uint8
    ref = (outs[0] / "reference.csv").read_text()
    assert "95.62" in ref and "97.89" in ref and "93.34" in ref
    assert "95.62" not in (outs[0] / "eval_train.csv").read_text()
    assert "95.62/97.89/93.34" in capsys.readouterr().out


def test_error_exit_codes(workspace, tmp_path, monkeypatch):
    bad = tmp_path / "bad.yaml"
    bad.write_text("train:\n  learning_rate: 0.1\n")
    assert cli.main(["train", "--config", str(bad), "--data", str(workspace / "data")]) == 2
    assert cli.main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "r")]) == 3
    # a default 64x64 model cannot run on the 32x32 dataset
    assert cli.main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path / "r")]) == 3

    def boom(self, *a, **k):
        raise TrainingError("non-finite loss term 'con' at step 0", term="con")

    monkeypatch.setattr("cmaformer.training.Trainer.train_step", boom)
    assert cli.main(["train", "--config", str(workspace / "tiny.yaml"), "--data", str(workspace / "data"),
                     "--out", str(tmp_path / "r2")]) == 4


def test_ablate_report(workspace):
    out = workspace / "ablate"
    assert cli.main(["ablate", "--config", str(workspace / "tiny.yaml"), "--data", str(workspace / "data"),
                     "--out", str(out), "--seeds", "0", "--labeled-fraction", "0.5"]) == 0
    rows = list(csv.DictReader(open(out / "ablation.csv")))
    assert [r["combination"] for r in rows] == ["vit only", "vit + cross-attention", "ldc only", "all components"]
    assert [r["paper_not_reproduced_average"] for r in rows] == ["83.29", "92.44", "93.50", "95.62"]
    assert {"tumor_mean", "tumor_std", "organ_mean", "average_mean"} <= set(rows[0])
    assert (out / "vit0_cross0_ldc1" / "seed0" / "checkpoint.npz").is_file()


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "cmaformer.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for verb in ("synth", "train", "eval", "ablate"):
        assert verb in res.stdout
