import json

import pytest
import yaml

from caedfkd.cli import EXIT_CODES, main


@pytest.fixture
def cfg_file(tmp_path, tiny_raw):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(tiny_raw))
    return path


def _err(capsys):
    line = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(line)


def test_init_embeddings_and_refuse_overwrite(tmp_path, cfg_file, capsys):
    out = tmp_path / "e.caee"
    assert main(["init-embeddings", "--config", str(cfg_file), "--out", str(out)]) == 0
    assert json.loads(capsys.readouterr().out)["K"] == 3
    assert main(["init-embeddings", "--config", str(cfg_file), "--out", str(out)]) == EXIT_CODES["OutputError"]
    assert _err(capsys)["error"] == "OutputError"
    assert main(["init-embeddings", "--config", str(cfg_file), "--out", str(out), "--force"]) == 0


def test_usage_errors(capsys):
    assert main(["distill"]) == EXIT_CODES["usage"]
    assert "--teacher" in capsys.readouterr().err
    assert main(["frobnicate"]) == EXIT_CODES["usage"]


def test_config_error_exit(tmp_path, tiny_raw, capsys):
    tiny_raw["student"]["tau"] = 0
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(tiny_raw))
    assert main(["init-embeddings", "--config", str(path), "--out-dir", str(tmp_path / "r")]) == 3
    err = _err(capsys)
    assert err["message"] == "student.tau must be > 0" and err["exit"] == 3


def test_format_error_exit(tmp_path, cfg_file, capsys):
    bad = tmp_path / "t.ckpt"
    bad.write_bytes(b"junk")
    assert main(["eval", "--config", str(cfg_file), "--ckpt", str(bad)]) == EXIT_CODES["FormatError"]


def test_pipeline_end_to_end(tmp_path, cfg_file, capsys, monkeypatch):
    monkeypatch.setenv("CAE_OUT_ROOT", str(tmp_path))
    assert main(["pretrain-teacher", "--config", str(cfg_file), "--out", "teacher.ckpt"]) == 0
    teacher = tmp_path / "teacher.ckpt"
    assert teacher.exists()
    capsys.readouterr()
    assert main(["distill", "--config", str(cfg_file), "--teacher", str(teacher), "--out-dir", "run"]) == 0
    summary = json.loads(capsys.readouterr().out)
    run = tmp_path / "run"
    for name in ("config.yaml", "embeddings.caee", "metrics.jsonl", "summary.csv", "student.ckpt", "generator.ckpt"):
        assert (run / name).exists(), name
    assert 0.0 <= summary["student_acc"] <= 1.0
    assert main(["distill", "--config", str(cfg_file), "--teacher", str(teacher), "--out-dir", "run"]) == 6
    capsys.readouterr()
    assert main(["eval", "--config", str(cfg_file), "--ckpt", str(run / "student.ckpt")]) == 0
    assert json.loads(capsys.readouterr().out)["role"] == "student"
    assert main(["report", "--run-dir", str(run), "--out-dir", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep/loss_curves.png").exists()


def test_ablate_empty_plan(tmp_path, cfg_file, capsys):
    plan = tmp_path / "plan.yaml"
    plan.write_text("axis: n_sources\nvalues: []\n")
    code = main(["ablate", "--config", str(cfg_file), "--plan", str(plan), "--out-dir", str(tmp_path / "a")])
    assert code == EXIT_CODES["ConfigError"]
    assert "empty values" in _err(capsys)["message"]


def test_ablate_small_plan(tmp_path, cfg_file, capsys):
    plan = tmp_path / "plan.yaml"
    plan.write_text("axis: prompt_mode\nvalues: [name, index]\n")
    assert main(["ablate", "--config", str(cfg_file), "--plan", str(plan), "--out-dir", str(tmp_path / "a")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["cells"] == 2 and out["failed"] == 0
    assert (tmp_path / "a/ablation.csv").exists()
