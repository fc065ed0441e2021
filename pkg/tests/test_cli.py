import json

import numpy as np
import pytest

from facetree.cli import main
from facetree.training import Checkpoint

TINY = """input_size = 16
L = 5
branch_stages = 2
stage_widths = 8,12
branch_channels = 4
branch_up_channels = 4
head_width = 8
negative_keep_rate = 0.5
pose_scale = 30.0
loss_weights = 1,1,0.001,1
train.batch_size = 4
train.learning_rate = 0.001
train.pretrain_iterations = 3
train.multitask_iterations = 3
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    assert main(["synth", "--config", str(cfg), "--out", str(root / "synth"), "--count", "6"]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(root / "synth"), "--out", str(root / "run")]) == 0
    return root


def test_synth_and_train_outputs(workspace):
    run = workspace / "run"
    for name in ("pretrain.ckpt", "model.ckpt", "loss.csv", "pretrain_loss.csv", "manifest.json"):
        assert (run / name).is_file()
    assert (run / "loss.csv").read_text().splitlines()[0] == "iteration,L0,L1,L2,L3,total"
    assert len((run / "loss.csv").read_text().splitlines()) == 4
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["command"].startswith("facetree train") and "model.ckpt" in manifest["outputs"]
    assert "input_size = 16" in manifest["config"]
    assert Checkpoint.load(run / "model.ckpt").kind == "multitask"
    assert len((workspace / "synth" / "annotations.tsv").read_text().splitlines()) == 6


def test_training_twice_is_identical(workspace):
    out = workspace / "run2"
    main(["train", "--config", str(workspace / "tiny.cfg"), "--data", str(workspace / "synth"), "--out", str(out)])
    assert (out / "model.ckpt").read_bytes() == (workspace / "run" / "model.ckpt").read_bytes()


def test_eval_writes_report(workspace, capsys):
    out = workspace / "eval"
    code = main(["eval", "--checkpoint", str(workspace / "run" / "model.ckpt"), "--data", str(workspace / "synth"),
                 "--protocol", "pifa", "--out", str(out)])
    assert code == 0
    report = (out / "report.txt").read_text()
    assert "protocol = pifa" in report and "nme_percent[[30,60]]" in report
    assert (out / "ced.csv").read_text().startswith("threshold,fraction")
    assert len(np.loadtxt(out / "per_sample_nme.txt")) == 6
    assert "mean_nme_percent" in capsys.readouterr().out


def test_pifa_without_pose_is_protocol_error(workspace, capsys):
    ann = (workspace / "synth" / "annotations.tsv").read_text().splitlines()
    fields = ann[0].split("\t")
    fields[5:8] = ["nan"] * 3
    nopose = workspace / "nopose.tsv"
    nopose.write_text("\n".join(["\t".join(fields)] + ann[1:]) + "\n")
    (workspace / "images").mkdir(exist_ok=True)
    for p in (workspace / "synth" / "images").iterdir():
        (workspace / "images" / p.name).write_bytes(p.read_bytes())
    code = main(["eval", "--checkpoint", str(workspace / "run" / "model.ckpt"), "--data", str(nopose),
                 "--protocol", "pifa", "--out", str(workspace / "e2")])
    err = capsys.readouterr().err
    assert code == 1 and "pifa" in err and len(err.strip().splitlines()) == 1


def test_predict(workspace):
    boxes = workspace / "boxes.txt"
    line = (workspace / "synth" / "annotations.tsv").read_text().splitlines()[0].split("\t")
    boxes.write_text("\t".join(line[:5]) + "\n")
    out = workspace / "pred"
    assert main(["predict", "--checkpoint", str(workspace / "run" / "model.ckpt"), "--boxes", str(boxes),
                 "--data", str(workspace / "synth"), "--out", str(out)]) == 0
    rows = (out / "predictions.tsv").read_text().splitlines()
    assert len(rows) == 2 and len(rows[1].split("\t")) == 4 + 4 * 5
    code = main(["predict", "--checkpoint", str(workspace / "run" / "pretrain.ckpt"), "--boxes", str(boxes),
                 "--data", str(workspace / "synth"), "--out", str(out)])
    assert code == 2


def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path)]) == 0
    table = (tmp_path / "gradcheck.txt").read_text()
    assert "conv2d" in table and "FAIL" not in table
    assert (tmp_path / "manifest.json").is_file()


@pytest.mark.parametrize("argv, code", [
    (["bogus"], 2),
    (["train", "--out", "x"], 2),
    (["train", "--data", "nowhere", "--out", "x", "--frobnicate"], 2),
    (["train", "--data", "nowhere", "--out", "x", "--routing", "maybe"], 2),
    (["eval", "--checkpoint", "missing.ckpt", "--data", ".", "--out", "x"], 1),
])
def test_bad_invocations(argv, code, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == code
    err = capsys.readouterr().err
    assert err.startswith("facetree:") and len(err.strip().splitlines()) == 1


def test_config_violation_is_reported(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("input_size = 65\n")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")]) != 0
    assert "input_size" in capsys.readouterr().err
