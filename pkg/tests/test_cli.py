import hashlib
import json
import subprocess
import sys
from pathlib import Path

import pytest

from affuse.cli import main
from affuse.data import load_dataset

QUICK = ["--epochs", "2", "--patience", "1"]


def tree_digest(root: Path):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        h.update(str(p.relative_to(root)).encode())
        if p.is_file():
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth", "--students", "6", "--activities", "2", "--seed", "1", "--out", str(out)]) == 0
    return out


def test_synth_counts(tmp_path, capsys):
    assert main(["synth", "--students", "4", "--activities", "2", "--out", str(tmp_path / "d")]) == 0
    assert len(load_dataset(tmp_path / "d")) == 8
    assert "activities: 8" in capsys.readouterr().out


def test_synth_default_scale(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "d")]) == 0
    recs = load_dataset(tmp_path / "d")
    assert len(recs) == 164 and len({r.student_id for r in recs}) == 50


def test_refuses_non_empty_out(tmp_path, dataset):
    target = tmp_path / "o"
    target.mkdir()
    (target / "keep.txt").write_text("x")
    assert main(["synth", "--students", "4", "--activities", "1", "--out", str(target)]) == 2
    assert (target / "keep.txt").exists()
    assert main(["synth", "--students", "4", "--activities", "1", "--out", str(target), "--force"]) == 0


def test_unknown_flag_exit_2():
    proc = subprocess.run([sys.executable, "-m", "affuse.cli", "cv", "--bogus"], capture_output=True, text=True)
    assert proc.returncode == 2
    assert "usage" in proc.stderr


def test_config_errors_exit_2(tmp_path, dataset, capsys):
    assert main(["cv", "--data", str(dataset), "--out", str(tmp_path / "a"), "--alpha", "-1"]) == 2
    assert "alpha" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text('{"train": {"learning_rate": 3}}')
    assert main(["cv", "--config", str(bad), "--data", str(dataset), "--out", str(tmp_path / "b")]) == 2
    assert "learning_rate" in capsys.readouterr().err
    assert main(["cv", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "c")]) == 2


def test_runtime_failure_exit_1(tmp_path, dataset):
    broken = tmp_path / "model"
    broken.mkdir()
    (broken / "model_config.json").write_text("{}")
    (broken / "model.ckpt").write_bytes(b"nope")
    assert main(["eval", "--data", str(dataset), "--model", str(broken), "--out", str(tmp_path / "e")]) != 0


def test_log_env(monkeypatch, tmp_path):
    monkeypatch.setenv("AFFUSE_LOG", "chatty")
    assert main(["synth", "--students", "2", "--activities", "1", "--out", str(tmp_path / "d")]) == 2
    monkeypatch.setenv("AFFUSE_LOG", "debug")
    assert main(["synth", "--students", "2", "--activities", "1", "--out", str(tmp_path / "d")]) == 0


def test_cv_artifacts_and_determinism(tmp_path, dataset):
    before = tree_digest(dataset)
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["cv", "--data", str(dataset), "--k", "3", *QUICK, "--conditions", "all", "--seed", "2"]
    assert main([*args, "--out", str(a)]) == 0
    for name in ("config.json", "metrics.csv", "losses.csv", "affinity_trajectory.csv", "summary.csv"):
        assert (a / name).exists(), name
    assert len(list((a / "checkpoints").iterdir())) == 3
    # re-run purely from the echoed config
    assert main(["cv", "--config", str(a / "config.json"), "--out", str(b)]) == 0
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert tree_digest(dataset) == before
    assert json.loads((a / "config.json").read_text())["resolved"]["train"]["max_epochs"] == 2


def test_train_eval_export_report(tmp_path, dataset, capsys):
    t = tmp_path / "train"
    assert main(["train", "--data", str(dataset), *QUICK, "--out", str(t)]) == 0
    model = t / "checkpoints" / "model"
    assert (model / "model.ckpt").exists()
    e = tmp_path / "eval"
    assert main(["eval", "--data", str(dataset), "--model", str(model), "--conditions", "grid",
                 "--out", str(e)]) == 0
    assert len((e / "metrics.csv").read_text().splitlines()) == 10
    x = tmp_path / "export"
    assert main(["export", "--data", str(dataset), "--model", str(model), "--out", str(x)]) == 0
    lines = (x / "embeddings.csv").read_text().splitlines()
    assert len(lines) == 1 + 12 * 4
    assert len(lines[0].split(",")) == 4 + 128
    assert len((x / "importance.csv").read_text().splitlines()) == 1 + 4 * 5
    x2 = tmp_path / "export2"
    assert main(["export", "--data", str(dataset), "--model", str(model), "--out", str(x2)]) == 0
    assert (x / "embeddings.csv").read_bytes() == (x2 / "embeddings.csv").read_bytes()
    capsys.readouterr()
    assert main(["report", str(e)]) == 0
    assert "| Condition |" in capsys.readouterr().out


def test_degrade_eval_table(tmp_path, dataset, capsys):
    out = tmp_path / "rob"
    assert main(["degrade-eval", "--data", str(dataset), "--k", "2", *QUICK, "--out", str(out)]) == 0
    rows = (out / "robustness.csv").read_text().splitlines()
    assert len(rows) == 1 + 9
    assert rows[0].startswith("condition,B_macro_f1")
    capsys.readouterr()
    assert main(["report", str(out), "--out", str(tmp_path / "rep")]) == 0
    md = (tmp_path / "rep" / "report.md").read_text()
    assert "Gaze dropout 50%" in md and "w/o Trace" in md


def test_ablate_tables(tmp_path, dataset):
    out = tmp_path / "abl"
    assert main(["ablate", "--data", str(dataset), "--k", "2", "--epochs", "1", "--patience", "1",
                 "--tables", "components,combinations", "--out", str(out)]) == 0
    rows = (out / "ablation.csv").read_text().splitlines()[1:]
    assert sum(r.startswith("components,") for r in rows) == 4
    assert sum(r.startswith("combinations,") for r in rows) == 8
    md = (out / "report.md").read_text()
    assert "concat baseline" in md and "Trace + AU + Pose" in md
