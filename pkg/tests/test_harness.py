import csv
import json

import pytest

from caedfkd.config import RunConfig
from caedfkd.diagnostics import MetricsRecord
from caedfkd.errors import ConfigError, OutputError
from caedfkd.harness import (
    AblationAxis,
    AblationPlan,
    Lab,
    cell_overrides,
    emit_report,
    measure_speedup,
    read_metrics,
    run_ablation,
    summarize_cells,
)


def _records(n=10):
    return [MetricsRecord(epoch=e, generator_steps=5 * e, student_steps=25 * e, l_ce=1 / e, l_bn=0.5, l_adv=-0.1,
                          l_g=0.4 + 1 / e, l_kl=2 / e, l_cncl=3.0, l_s=3 + 2 / e, student_acc=min(1.0, 0.1 * e),
                          lr=0.1, low_conf=[0.1 * (k % 3) for k in range(10)], epoch_seconds=1.0 + e)
            for e in range(1, n + 1)]


def test_emit_report_files_and_determinism(tmp_path):
    files = emit_report(_records(), tmp_path / "a")
    names = {f.name for f in files}
    assert {"metrics.jsonl", "timing.jsonl", "summary.csv"} <= names
    assert len([f for f in files if f.suffix == ".png"]) >= 2
    emit_report(_records(), tmp_path / "b")
    assert (tmp_path / "a/metrics.jsonl").read_bytes() == (tmp_path / "b/metrics.jsonl").read_bytes()
    lines = (tmp_path / "a/metrics.jsonl").read_text().splitlines()
    assert len(lines) == 10 and json.loads(lines[0])["epoch"] == 1
    rows = list(csv.DictReader((tmp_path / "a/summary.csv").open()))
    assert len(rows) == 10 and "low_conf_0" in rows[0]
    again = read_metrics(tmp_path / "a")
    assert again == _records()


def test_emit_report_errors(tmp_path):
    with pytest.raises(ConfigError):
        emit_report([], tmp_path / "x")
    recs = _records(3)
    with pytest.raises(ConfigError):
        emit_report([recs[1], recs[0]], tmp_path / "y")
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OutputError):
        emit_report(recs, blocker / "sub")


def test_plan_validation():
    base = RunConfig()
    with pytest.raises(ConfigError, match="empty values"):
        AblationPlan("n_sources", [], base)
    with pytest.raises(ConfigError, match="unknown ablation axis"):
        AblationPlan("depth", [1], base)
    with pytest.raises(ConfigError, match="unknown ablation plan key"):
        AblationPlan.from_dict({"axis": "n_sources", "values": [2], "seeds": 3}, base)
    plan = AblationPlan("n_sources", [2, 3], base.replace({"seed": 4}), repetitions=2)
    assert plan.seeds == [4, 5]
    assert [(v, r, o["seed"]) for v, r, o in plan.cells()] == [(2, 0, 4), (2, 1, 5), (3, 0, 4), (3, 1, 5)]


def test_cell_overrides():
    assert cell_overrides(AblationAxis.CEND_ON_OFF, "off") == {"embeddings.strategy": "gaussian"}
    assert cell_overrides(AblationAxis.PROVIDER, "stub:7")["embeddings.provider_seed"] == 7
    assert cell_overrides(AblationAxis.LAMBDA_SWEEP, [0.5, 2]) == {"generator.lambda_bn": 0.5,
                                                                    "generator.lambda_adv": 2.0}
    with pytest.raises(ConfigError):
        cell_overrides(AblationAxis.PROVIDER, "file")
    with pytest.raises(ConfigError):
        cell_overrides(AblationAxis.COMPONENTS, "everything")


def test_small_sweep_records_failed_cell(tmp_path, tiny_cfg):
    lab = Lab()
    plan = AblationPlan("provider", ["stub:1", f"file:{tmp_path / 'missing.caee'}"], tiny_cfg)
    rows = run_ablation(plan, tmp_path / "out", lab)
    assert [r["status"] for r in rows] == ["ok", "failed"]
    assert "missing.caee" in rows[1]["error"]
    assert rows[0]["epochs"] == 2 and 0.0 <= rows[0]["final_acc"] <= 1.0
    table = list(csv.DictReader((tmp_path / "out/ablation.csv").open()))
    assert len(table) == 2
    assert (tmp_path / "out/cells/000/metrics.jsonl").exists()
    summary = summarize_cells(rows)
    assert summary["stub:1"] == rows[0]["final_acc"]


def test_n_sources_sweep_runs(tiny_cfg):
    rows = run_ablation(AblationPlan("n_sources", [1, 3], tiny_cfg), lab=Lab())
    assert all(r["status"] == "ok" for r in rows)
    assert rows[0]["config_digest"] != rows[1]["config_digest"]


def test_measure_speedup_guards(tiny_cfg):
    with pytest.raises(ConfigError, match="epochs >= 3"):
        measure_speedup(tiny_cfg, tiny_cfg, epochs=1)
    res = measure_speedup(tiny_cfg, tiny_cfg.replace({"embeddings.strategy": "gaussian"}), epochs=3)
    assert res.ratio > 0 and len(res.seconds_a) == 3
