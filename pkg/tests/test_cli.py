import hashlib
import json

import numpy as np
import pytest

from diffref3d import checkpoint
from diffref3d.cli import EVAL_COLUMNS, main, read_csv
from diffref3d.config import InferConfig
from diffref3d.pipeline import export_tt_norms, run_evaluation
from diffref3d.scene import generate_corpus, read_corpus


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.yaml"
    cfg.write_text("epochs: 1\nbatch_scenes: 4\nham.d: 16\nham.det_hidden: 32\n")
    assert main(["gen-data", "--seed", "2", "--scenes", "8", "--out", str(root / "train.jsonl")]) == 0
    assert main(["gen-data", "--seed", "3", "--scenes", "4", "--out", str(root / "eval.jsonl")]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(root / "train.jsonl"), "--out-ckpt", str(root / "m.ckpt")]) == 0
    return root


def test_gen_data_deterministic(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    main(["gen-data", "--seed", "5", "--scenes", "3", "--out", str(a)])
    main(["gen-data", "--seed", "5", "--scenes", "3", "--out", str(b)])
    assert sha(a) == sha(b)
    assert read_corpus(a) == generate_corpus(5, 3)
    manifest = json.loads((tmp_path / "a.jsonl.manifest.json").read_text())
    assert manifest["seed"] == 5 and len(manifest["hash"]) == 16


def test_gen_data_zero_scenes(tmp_path):
    out = tmp_path / "empty.jsonl"
    assert main(["gen-data", "--scenes", "0", "--out", str(out)]) == 0
    assert out.read_bytes() == b""


def test_gen_data_unwritable(tmp_path, capsys):
    assert main(["gen-data", "--scenes", "1", "--out", str(tmp_path / "missing" / "x.jsonl")]) == 3
    assert "I/O error" in capsys.readouterr().err


def test_train_outputs(workspace):
    ckpt = workspace / "m.ckpt"
    model = checkpoint.load(ckpt)
    assert model.cfg.ham.d == 16
    log = read_csv(workspace / "m.ckpt.log.csv")
    assert len(log) == 2 and set(log[0]) == {"step", "epoch", "reg_loss", "cls_loss"}
    header = (workspace / "m.ckpt.log.csv").read_text().splitlines()[0]
    manifest = json.loads((workspace / "m.ckpt.manifest.json").read_text())
    assert header == f"# diffref3d train-log v1 manifest={manifest['hash']}"
    assert manifest["inputs"]["data"]["sha256"] == sha(workspace / "train.jsonl")


def test_train_rerun_identical_checkpoint(workspace, tmp_path):
    out = tmp_path / "again.ckpt"
    main(["train", "--config", str(workspace / "cfg.yaml"), "--data", str(workspace / "train.jsonl"), "--out-ckpt", str(out)])
    assert sha(out) == sha(workspace / "m.ckpt")


def test_train_baseline_head(workspace, tmp_path):
    cfg = tmp_path / "base.yaml"
    cfg.write_text("epochs: 1\nenable_ham: false\nham.d: 16\n")
    out = tmp_path / "base.ckpt"
    assert main(["train", "--config", str(cfg), "--data", str(workspace / "train.jsonl"), "--out-ckpt", str(out)]) == 0
    assert not checkpoint.load(out).cfg.enable_ham


def test_train_errors(workspace, tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nope.jsonl"), "--out-ckpt", str(tmp_path / "x.ckpt")]) == 3
    assert "nope.jsonl" in capsys.readouterr().err
    bad = tmp_path / "bad.yaml"
    bad.write_text("diffusion.snrr: 2\n")
    code = main(["train", "--config", str(bad), "--data", str(workspace / "train.jsonl"), "--out-ckpt", str(tmp_path / "x.ckpt")])
    assert code == 2
    assert "diffusion.snrr" in capsys.readouterr().err


def test_data_dir_env(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv("DIFFREF3D_DATA_DIR", str(workspace))
    monkeypatch.chdir(tmp_path)
    out = tmp_path / "tt.csv"
    assert main(["export-tt", "--ckpt", "m.ckpt", "--out", str(out)]) == 0


def test_eval_rows(workspace, tmp_path):
    out = tmp_path / "eval.csv"
    args = ["eval", "--ckpt", str(workspace / "m.ckpt"), "--data", str(workspace / "eval.jsonl"), "--steps", "3"]
    assert main([*args, "--out", str(out), "--trace", str(tmp_path / "trace.jsonl")]) == 0
    rows = read_csv(out)
    assert [r["row"] for r in rows] == ["step1", "step2", "step3", "final"]
    assert list(rows[0]) == EVAL_COLUMNS
    for r in rows:
        for key in ("mean_iou_predictions", "recall_0.5", "ap_r40"):
            assert 0.0 <= float(r[key]) <= 1.0
    assert rows[-1]["mean_iou_predictions"] == rows[-2]["mean_iou_predictions"]
    model = checkpoint.load(workspace / "m.ckpt")
    rep = run_evaluation(model, read_corpus(workspace / "eval.jsonl"), InferConfig(steps=3))
    assert float(rows[-1]["mean_iou_predictions"]) == rep.mean_iou_predictions
    assert [float(r["mean_iou_predictions"]) for r in rows[:3]] == rep.per_step_mean_iou
    trace = (tmp_path / "trace.jsonl").read_text().splitlines()
    assert json.loads(trace[0])["format"] == "diffref3d-trace"
    assert len(trace) == 1 + 3 * 4


def test_eval_steps_one_modes_identical(workspace, tmp_path):
    outs = {}
    for mode in ("none", "mean", "nms"):
        out = tmp_path / f"{mode}.csv"
        main(["eval", "--ckpt", str(workspace / "m.ckpt"), "--data", str(workspace / "eval.jsonl"), "--ensemble", mode, "--out", str(out)])
        outs[mode] = [{k: v for k, v in r.items() if k != "ensemble"} for r in read_csv(out)]
    assert outs["none"] == outs["mean"] == outs["nms"]


def test_eval_rejects_bad_steps(workspace, tmp_path, capsys):
    args = ["eval", "--ckpt", str(workspace / "m.ckpt"), "--data", str(workspace / "eval.jsonl"), "--out", str(tmp_path / "e.csv")]
    assert main([*args, "--steps", "0"]) == 2
    assert main([*args, "--steps", "2000"]) == 2
    assert main([*args, "--ensemble", "median"]) == 2


def test_eval_latency_flag(workspace, tmp_path):
    out = tmp_path / "lat.csv"
    main(["eval", "--ckpt", str(workspace / "m.ckpt"), "--data", str(workspace / "eval.jsonl"), "--with-latency", "--out", str(out)])
    assert float(read_csv(out)[0]["latency_ms"]) > 0


def test_export_tt(workspace, tmp_path):
    out = tmp_path / "tt.csv"
    assert main(["export-tt", "--ckpt", str(workspace / "m.ckpt"), "--out", str(out)]) == 0
    rows = read_csv(out)
    assert len(rows) == 1000
    expected = export_tt_norms(checkpoint.load(workspace / "m.ckpt"))
    np.testing.assert_array_equal([float(r["scale_norm"]) for r in rows], expected[:, 1])
    again = tmp_path / "tt2.csv"
    main(["export-tt", "--ckpt", str(workspace / "m.ckpt"), "--out", str(again)])
    assert sha(out) == sha(again)


def test_export_tt_bad_checkpoint(tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"nope")
    assert main(["export-tt", "--ckpt", str(bad), "--out", str(tmp_path / "o.csv")]) == 3


@pytest.mark.parametrize(
    "axis,values,n_rows,first_col",
    [
        ("snr", ["1", "2", "4"], 3, "snr"),
        ("tt", ["off", "on"], 2, "tt"),
        ("steps", ["1", "2", "3", "4", "5"], 5, "steps"),
        ("ensemble", ["none", "nms", "mean"], 3, "ensemble"),
    ],
)
def test_sweep_tables(workspace, tmp_path, axis, values, n_rows, first_col):
    out = tmp_path / f"{axis}.csv"
    args = ["sweep", "--axis", axis, "--values", *values, "--config", str(workspace / "cfg.yaml")]
    args += ["--data", str(workspace / "train.jsonl"), "--eval-data", str(workspace / "eval.jsonl"), "--out", str(out)]
    if axis in ("steps", "ensemble"):
        args += ["--ckpt", str(workspace / "m.ckpt")]
    assert main(args) == 0
    rows = read_csv(out)
    assert len(rows) == n_rows
    assert list(rows[0])[0] == first_col
    assert out.read_text().startswith(f"# diffref3d sweep-{axis} v1 manifest=")


def test_sweep_unknown_axis(workspace, tmp_path, capsys):
    code = main(["sweep", "--axis", "lr", "--data", str(workspace / "train.jsonl"), "--out", str(tmp_path / "s.csv")])
    assert code == 2
    assert "lr" in capsys.readouterr().err
