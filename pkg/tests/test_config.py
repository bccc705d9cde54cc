from pathlib import Path

import pytest

from helpers import DEMO, DEMO_CONFIG
from polygnosis.config import ConfigError, RunConfig, from_mapping, load_config, load_toml
from polygnosis.gateway import Rates

BASE = {"paths": {"trace": "t.jsonl"}}


def test_demo_config_loads_with_resolved_paths():
    cfg = load_config(DEMO_CONFIG)
    assert cfg.track_id == "direct.dnc_cot_reflect"
    assert cfg.paths.alerts == DEMO / "alerts.jsonl"
    assert cfg.rate_card.for_model("demo-analyst") == Rates(0.10, 0.40)
    assert (cfg.cluster_reflection_max, cfg.analysis_reflection_max) == (3, 1)
    assert cfg.paths.trace_for("2026-03-25", 2, cfg.track_id) == (
        DEMO / "traces" / "direct.dnc_cot_reflect" / "2026-03-25_run2.jsonl")


def test_reflection_bounds_are_fixed_without_override():
    with pytest.raises(ConfigError, match="unsafe-bounds"):
        from_mapping({**BASE, "reflection": {"clustering_max_iterations": 5}})
    with pytest.raises(ConfigError):
        from_mapping({**BASE, "reflection": {"analysis_max_applications": 2}})
    cfg = from_mapping({**BASE, "unsafe_bounds": True, "reflection": {"clustering_max_iterations": 5}})
    assert cfg.cluster_reflection_max == 5


@pytest.mark.parametrize("data, msg", [
    ({"analysis_track": "cot"}, "analysis track"),
    ({"clustering_track": "agentic"}, "clustering track"),
    ({"colour": "blue"}, "unknown config keys"),
    ({"backend": {"kind": "grpc"}}, "backend"),
    ({"backend": {"kind": "http"}}, "base_url"),
    ({"clustering_track": "reflection_tools"}, "search"),
    ({"max_in_flight": 0}, "max_in_flight"),
])
def test_invalid_configs(data, msg):
    with pytest.raises(ConfigError, match=msg):
        from_mapping({**BASE, **data})


def test_scripted_backend_needs_trace():
    with pytest.raises(ConfigError, match="trace"):
        from_mapping({})


def test_track_shorthand_and_defaults():
    cfg = from_mapping({**BASE, "track": "global"})
    assert cfg.track_id == "direct.global"
    assert cfg.models == {"default": "scripted"} and cfg.max_in_flight == 4


def test_describe_is_secret_free_and_location_independent(tmp_path, monkeypatch):
    monkeypatch.setenv("LLM_API_KEY", "sekrit")
    a = load_config(DEMO_CONFIG).describe()
    copy = tmp_path / "elsewhere" / "config.toml"
    copy.parent.mkdir()
    copy.write_bytes(DEMO_CONFIG.read_bytes())
    b = load_config(copy).describe()
    assert a == b
    assert "sekrit" not in repr(a)
    assert a["paths"]["alerts"] == "alerts.jsonl"


def test_relative_paths_resolve_against_config_dir(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('[paths]\ntrace = "tr/{run}.jsonl"\nalerts = "a.jsonl"\nout = "/abs/out"\n')
    cfg = load_config(p)
    assert cfg.paths.alerts == tmp_path / "a.jsonl"
    assert cfg.paths.out == Path("/abs/out")
    assert load_toml(p)["paths"]["alerts"] == "a.jsonl"


def test_run_config_is_frozen():
    cfg = RunConfig(paths=from_mapping(BASE).paths)
    with pytest.raises(Exception):
        cfg.analysis_track = "global"


def test_malformed_toml_is_a_config_error(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("analysis_track = \n")
    with pytest.raises(ConfigError):
        load_config(p)
