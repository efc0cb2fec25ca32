import json
import os

import pytest

from dqos_lab.loaders import (
    AttackSettings,
    ConfigError,
    EvalSettings,
    ExperimentConfig,
    config_from_dict,
    config_hash,
    config_to_dict,
    load_config,
    load_experiment_config,
)
from dqos_lab.simcore import TrafficClass


def test_load_config_valid_path(tmp_path, monkeypatch):
    monkeypatch.setattr(os, "getcwd", lambda: str(tmp_path))

    config_file = tmp_path / "config.json"
    config_file.write_text(json.dumps({"seed": 3, "_note": "ignored", "sim": {"_about": "x", "table_capacity": 5}}))

    assert load_config(str(config_file)) == {"seed": 3, "sim": {"table_capacity": 5}}


def test_load_config_path_traversal():
    with pytest.raises(ValueError, match="Path traversal detected"):
        load_config("../../../../etc/passwd")


def test_syntax_error_reports_line_and_column(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "bad.json").write_text('{\n  "seed": 1,\n  "sim": {,}\n}\n')
    with pytest.raises(ConfigError) as excinfo:
        load_config("bad.json")
    assert excinfo.value.line == 3
    assert str(excinfo.value).startswith("bad.json:3:")


def test_top_level_must_be_object(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "list.json").write_text("[1, 2]")
    with pytest.raises(ConfigError, match="JSON object"):
        load_config("list.json")


def test_unknown_keys_are_named():
    with pytest.raises(ConfigError, match="unknown key sim.table_size"):
        config_from_dict({"sim": {"table_size": 10}})
    with pytest.raises(ConfigError, match="unknown key extras"):
        config_from_dict({"extras": {}})


def test_invalid_values_are_config_errors():
    with pytest.raises(ConfigError, match="invalid attack"):
        config_from_dict({"attack": {"bands": []}})
    with pytest.raises(ConfigError, match="seed"):
        config_from_dict({"seed": -1})
    with pytest.raises(ConfigError, match="seed"):
        config_from_dict({"seed": True})
    assert isinstance(ConfigError("x"), ValueError)


def test_missing_keys_keep_defaults():
    config = config_from_dict({"seed": 4, "attack": {"bands": [2]}})
    assert config.attack.bands == (2.0,)
    assert config.attack.increment_p == 0.05
    assert config.sim.seed == 4
    assert config.train.seed == 4
    assert config.traffic.frame_size_bytes == 1250


def test_packaged_config_matches_built_in_defaults(monkeypatch):
    monkeypatch.chdir(os.path.join(os.path.dirname(__file__), ".."))
    config = load_experiment_config("config.json")
    assert config_to_dict(config) == config_to_dict(ExperimentConfig())
    assert config.sim.record_classes == frozenset({TrafficClass.VIDEO, TrafficClass.ATTACK})


def test_no_path_gives_defaults():
    assert load_experiment_config(None) == ExperimentConfig()


def test_hash_is_stable_and_seed_sensitive():
    assert config_hash(ExperimentConfig()) == config_hash(ExperimentConfig())
    assert len(config_hash(ExperimentConfig())) == 16
    assert config_hash(ExperimentConfig()) != config_hash(ExperimentConfig().with_seed(1))


def test_config_to_dict_is_json_ready():
    data = config_to_dict(ExperimentConfig())
    assert data["sim"]["hard_timeout_ms"] is None
    assert data["sim"]["record_classes"] == ["attack", "video"]
    json.dumps(data)


def test_with_seed_propagates():
    config = ExperimentConfig().with_seed(9)
    assert (config.seed, config.sim.seed, config.train.seed) == (9, 9, 9)


def test_section_validation():
    with pytest.raises(ValueError):
        AttackSettings(warmup_s=1.0, window_s=5.0)
    with pytest.raises(ValueError):
        EvalSettings(min_drop_pct=12.0, max_drop_pct=10.0)
