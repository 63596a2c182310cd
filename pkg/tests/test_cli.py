import csv
import json

import pytest

from ctclip import cli
from ctclip import gradcheck

SMALL = {"image_size": 32, "patch": 8, "channels": 8, "heads": 2, "vit_depth": 1, "text_depth": 1,
         "mlp_ratio": 2, "adapter_r": 4, "feb_dim": 8, "feb_heads": 2, "cls_hidden": 8,
         "text_len": 8}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({
        "model": SMALL,
        "train": {"learning_rate": 3e-3, "batch_size": 8, "epochs": 2, "split_ratio": 0.5},
        "synthetic": {"classes": 3, "per_class": 4, "size": 32, "seed": 1},
    }))
    data = root / "data"
    assert cli.main(["synth", "--out", str(data), "--classes", "3", "--per-class", "4",
                     "--size", "32"]) == 0
    run = root / "run"
    assert cli.main(["train", "--config", str(cfg), "--data", str(data), "--out", str(run)]) == 0
    return root, cfg, data, run


def test_train_outputs(workspace):
    _, _, _, run = workspace
    for name in ("model.ctcp", "history.csv", "history.png", "metrics.json", "confusion.png"):
        assert (run / name).is_file(), name
    rows = list(csv.DictReader(open(run / "history.csv")))
    assert [r["epoch"] for r in rows] == ["1", "2"]


def test_eval_writes_metrics(workspace, tmp_path, capsys):
    _, _, data, run = workspace
    assert cli.main(["eval", "--checkpoint", str(run / "model.ctcp"), "--data", str(data),
                     "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "metrics.json").read_text())
    assert len(doc["confusion"]) == 3 and sum(map(sum, doc["confusion"])) == 12
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split("\t") == ["class", "precision", "recall", "f1"]


def test_predict_rows(workspace, capsys):
    _, _, data, run = workspace
    assert cli.main(["predict", "--checkpoint", str(run / "model.ctcp"), str(data / "class1")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 5
    path, name, prob = lines[1].split("\t")
    assert name.startswith("class") and 0 < float(prob) <= 1


@pytest.mark.parametrize("method", ["attention", "gradcam"])
def test_explain_files_deterministic(workspace, tmp_path, method):
    _, _, data, run = workspace
    image = data / "class0" / "00000.ppm"
    outs = []
    for d in ("a", "b"):
        assert cli.main(["explain", "--checkpoint", str(run / "model.ctcp"), "--method", method,
                         "--out", str(tmp_path / d), "--figures", str(image)]) == 0
        outs.append([(tmp_path / d / f"00000_{method}_{s}").read_bytes()
                     for s in ("heat.ppm", "overlay.ppm")])
        assert (tmp_path / d / f"00000_{method}.png").is_file()
    assert outs[0] == outs[1]


def test_explain_bad_class_is_usage_error(workspace, tmp_path):
    _, _, data, run = workspace
    assert cli.main(["explain", "--checkpoint", str(run / "model.ctcp"), "--class", "9",
                     "--out", str(tmp_path), str(data / "class0" / "00000.ppm")]) == 1


def test_ablate_feb_table(workspace, tmp_path):
    _, cfg, data, _ = workspace
    assert cli.main(["ablate", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path),
                     "--table", "feb", "--epochs", "1"]) == 0
    lines = (tmp_path / "ablation_feb.csv").read_text().splitlines()
    assert lines[0] == "name,acc,precision,recall,f1" and len(lines) == 4
    assert (tmp_path / "ablation_feb.png").is_file()


def test_gradcheck_pass(capsys):
    assert cli.main(["gradcheck", "--seeds", "1", "--coords", "1"]) == 0
    out = capsys.readouterr().out
    assert "micro_model" in out and out.splitlines()[0] == "check\tmax_rel_err"


def test_gradcheck_failure_exit_code(monkeypatch):
    monkeypatch.setattr(gradcheck, "run_suite", lambda **_: {"conv2d": 3e-4})
    assert cli.main(["gradcheck"]) == 2


@pytest.mark.parametrize("argv,code", [
    ([], 1),
    (["frobnicate"], 1),
    (["train", "--epochs", "x"], 1),
    (["eval", "--checkpoint", "/nonexistent/model.ctcp", "--data", "/nonexistent"], 2),
    (["train", "--config", "/nonexistent/cfg.json"], 2),
])
def test_exit_codes(argv, code):
    assert cli.main(argv) == code


def test_unknown_config_key_exit_one(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"bogus": 1}')
    assert cli.main(["train", "--config", str(cfg), "--synthetic"]) == 1


def test_corrupt_checkpoint_exit_two(workspace, tmp_path):
    _, _, data, _ = workspace
    bad = tmp_path / "bad.ctcp"
    bad.write_bytes(b"XXXX" + bytes(32))
    assert cli.main(["predict", "--checkpoint", str(bad), str(data)]) == 2


def test_thread_env(monkeypatch):
    monkeypatch.setenv("CT_FUSION_THREADS", "3")
    assert cli.threads() == 3
    monkeypatch.setenv("CT_FUSION_THREADS", "0")
    with pytest.raises(Exception):
        cli.threads()
