import csv
import json

import pytest

from helpers import DEMO, DEMO_CONFIG
from polygnosis.cli import main
from polygnosis.ingestion import write_journal, replay_fixture


def run(*argv, out):
    return main(["--config", str(DEMO_CONFIG), "--out-root", str(out), *argv])


def test_replay_writes_runs(tmp_path, capsys):
    assert run("replay", "--window", "2026-03-25", "--runs", "2", out=tmp_path) == 0
    printed = capsys.readouterr().out
    assert "run_0: ok" in printed and "run_1: ok" in printed
    assert (tmp_path / "2026-03-25" / "direct.dnc_cot_reflect" / "run_1" / "validated.jsonl").exists()


def test_single_stage_subcommands(tmp_path, capsys):
    for stage in ("ingest", "cluster", "keywords", "gdelt", "analyze", "validate"):
        assert run(stage, "--window", "2026-03-26", out=tmp_path) == 0, stage
    assert "validate: completed" in capsys.readouterr().out


def test_stage_without_upstream_artifacts_fails(tmp_path, capsys):
    assert run("cluster", "--window", "2026-03-26", out=tmp_path) == 1
    assert "cluster: failed" in capsys.readouterr().out


def test_ingest_fixture_override(tmp_path):
    alerts = replay_fixture(DEMO / "alerts.jsonl")[:3]
    fixture = tmp_path / "three.jsonl"
    write_journal(alerts, fixture)
    assert run("ingest", "--window", "2026-03-25", "--fixture", str(fixture), out=tmp_path / "out") == 0
    got = (tmp_path / "out" / "2026-03-25" / "direct.dnc_cot_reflect" / "run_0" / "alerts.jsonl").read_text()
    assert len(got.splitlines()) == 3


def test_ingest_needs_window(tmp_path, capsys):
    assert run("ingest", out=tmp_path) == 2


def test_evaluate_missing_gt_fails_before_any_stage(tmp_path, capsys):
    code = run("evaluate", "--windows", "2026-03-25", "--gt", str(tmp_path / "nope"), "--out", str(tmp_path / "ev"),
               out=tmp_path / "runs")
    assert code == 2
    assert "ground-truth directory not found" in capsys.readouterr().err
    assert not (tmp_path / "runs").exists() and not (tmp_path / "ev").exists()


def test_evaluate_demo(tmp_path, capsys):
    code = run("evaluate", "--track", "reflection.dnc", "--windows", "2026-03-25,2026-03-26", "--runs", "2",
               "--out", str(tmp_path / "ev"), out=tmp_path / "runs")
    assert code == 0
    with (tmp_path / "ev" / "summary.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [r["window"] for r in rows] == ["2026-03-25", "2026-03-26", "all"]
    assert rows[-1]["n_runs"] == "4" and rows[-1]["track"] == "reflection.dnc"
    assert float(rows[-1]["ari"]) > 0 and rows[-1]["consistency"]
    assert len((tmp_path / "ev" / "runs.jsonl").read_text().splitlines()) == 4
    meta = json.loads((tmp_path / "ev" / "summary_meta.json").read_text())
    assert meta["nmi_normalizer"] and meta["config"]["clustering_track"] == "reflection"
    assert "runs scored" in capsys.readouterr().out


def test_bad_config_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text('analysis_track = "cot"\n[paths]\ntrace = "t.jsonl"\n')
    assert main(["--config", str(cfg), "replay", "--window", "2026-03-25"]) == 2
    assert "configuration error" in capsys.readouterr().err


def test_unsafe_bounds_flag(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text(DEMO_CONFIG.read_text().replace("clustering_max_iterations = 3", "clustering_max_iterations = 4")
                   .replace('alerts = "', f'alerts = "{DEMO}/').replace('trace = "', f'trace = "{DEMO}/')
                   .replace('gdelt = "', f'gdelt = "{DEMO}/').replace('rubric = "', f'rubric = "{DEMO}/')
                   .replace('search = "', f'search = "{DEMO}/').replace('gt = "', f'gt = "{DEMO}/'))
    assert main(["--config", str(cfg), "--out-root", str(tmp_path / "o"), "ingest", "--window", "2026-03-25"]) == 2
    assert main(["--config", str(cfg), "--out-root", str(tmp_path / "o"), "--unsafe-bounds",
                 "ingest", "--window", "2026-03-25"]) == 0


def test_diff_subcommand(tmp_path, capsys):
    run("replay", "--window", "2026-03-25", out=tmp_path)
    run_dir = tmp_path / "2026-03-25" / "direct.dnc_cot_reflect" / "run_0"
    capsys.readouterr()
    assert main(["diff", str(run_dir), str(run_dir), "--gt", str(DEMO / "gt"),
                 "--file-a", "insights_pre_reflection.jsonl", "--file-b", "validated.jsonl"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["window"] == "2026-03-25" and "fixes" in rep and "breaks" in rep


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    out = capsys.readouterr().out
    for cmd in ("ingest", "cluster", "keywords", "gdelt", "analyze", "validate", "evaluate", "replay", "diff"):
        assert cmd in out
