import json
import sys

import pandas as pd
import pytest

import dqos_lab.dqos_cli as cli
from dqos_lab.predictor import DimensionMismatch
from dqos_lab.simcore import SimulationInvariantError


@pytest.fixture(autouse=True)
def quiet_logging(monkeypatch):
    # Stub logging.basicConfig to avoid writing run_log.txt
    monkeypatch.setattr(cli.logging, "basicConfig", lambda **kwargs: None)


def run_cli(monkeypatch, tmp_path, *args):
    monkeypatch.setattr(sys, "argv", ["dqos-lab", "--out", str(tmp_path), *args])
    cli.main()


def test_attack_flags_reach_config(monkeypatch, tmp_path):
    called = {}

    def fake_attack(config, checkpoint, out, bands, no_attack):
        called.update(
            checkpoint=checkpoint,
            bands=bands,
            no_attack=no_attack,
            p=config.attack.increment_p,
            q=config.attack.decrement_q,
            interval=config.attack.interval_s,
            seed=config.seed,
        )
        return pd.DataFrame({"band": ["k=2%"]})

    monkeypatch.setattr(cli, "run_attack_experiment", fake_attack)
    run_cli(monkeypatch, tmp_path, "--seed", "4", "attack", "--model", "m.json", "--band-k", "2", "--p", "0.1",
            "--q", "0.02", "--interval", "5")
    assert called == {
        "checkpoint": "m.json",
        "bands": [2.0],
        "no_attack": False,
        "p": 0.1,
        "q": 0.02,
        "interval": 5.0,
        "seed": 4,
    }


def test_attack_bands_and_no_attack(monkeypatch, tmp_path):
    called = {}

    def fake_attack(config, checkpoint, out, bands, no_attack):
        called.update(bands=bands, no_attack=no_attack)
        return pd.DataFrame()

    monkeypatch.setattr(cli, "run_attack_experiment", fake_attack)
    run_cli(monkeypatch, tmp_path, "attack", "--model", "m.json", "--bands", "1", "3", "--no-attack")
    assert called == {"bands": [1.0, 3.0], "no_attack": True}


def test_train_passes_models_and_jobs(monkeypatch, tmp_path):
    called = {}

    def fake_train(config, dataset, out, models, jobs):
        called.update(dataset=dataset, models=models, jobs=jobs)
        return pd.DataFrame({"model_id": models})

    monkeypatch.setattr(cli, "run_train", fake_train)
    run_cli(monkeypatch, tmp_path, "train", "--dataset", "d.tsv", "--models", "1", "6", "--jobs", "2")
    assert called == {"dataset": "d.tsv", "models": [1, 6], "jobs": 2}


def test_collect_duration_override(monkeypatch, tmp_path, capsys):
    monkeypatch.setattr(cli, "run_collect", lambda config, out: f"{out}:{config.collect.duration_s:g}")
    run_cli(monkeypatch, tmp_path, "collect", "--duration", "120")
    assert capsys.readouterr().out.strip() == f"{tmp_path}:120"


def test_eval_noisy_inputs_flag(monkeypatch, tmp_path):
    called = {}
    monkeypatch.setattr(
        cli, "run_eval", lambda config, model, out: called.setdefault("noisy", config.evaluation.noisy_inputs)
    )
    run_cli(monkeypatch, tmp_path, "eval", "--model", "m.json", "--noisy-inputs")
    assert called["noisy"] is True


def test_topology_dump_prints_json(monkeypatch, tmp_path, capsys):
    run_cli(monkeypatch, tmp_path, "topology", "--dump")
    data = json.loads(capsys.readouterr().out)
    assert data["target_switch"] == "switch34"


def test_topology_writes_file(monkeypatch, tmp_path):
    run_cli(monkeypatch, tmp_path, "topology")
    assert (tmp_path / "topology.json").is_file()


def test_missing_subcommand(monkeypatch, tmp_path):
    monkeypatch.setattr(sys, "argv", ["dqos-lab", "--out", str(tmp_path)])
    with pytest.raises(SystemExit) as excinfo:
        cli.main()
    # Argparse uses exit code 2 for argument errors
    assert excinfo.value.code == 2


def test_bad_config_exits_1(monkeypatch, tmp_path):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "bad.json").write_text('{"sim": {"table_size": 1}}')
    with pytest.raises(SystemExit) as excinfo:
        run_cli(monkeypatch, tmp_path, "--config", "bad.json", "topology")
    assert excinfo.value.code == 1


@pytest.mark.parametrize(
    "error, code",
    [
        (SimulationInvariantError("clock"), 2),
        (DimensionMismatch("width"), 2),
        (ValueError("test value error"), 1),
        (OSError("disk"), 1),
        (RuntimeError("test error"), 1),
    ],
)
def test_stage_errors_map_to_exit_codes(monkeypatch, tmp_path, error, code):
    def fake_baseline(*args, **kwargs):
        raise error

    monkeypatch.setattr(cli, "run_baseline", fake_baseline)
    with pytest.raises(SystemExit) as excinfo:
        run_cli(monkeypatch, tmp_path, "baseline")
    assert excinfo.value.code == code


def test_collect_uses_default_out_dir(monkeypatch, tmp_path, mocker):
    monkeypatch.chdir(tmp_path)
    stage = mocker.patch.object(cli, "run_collect", return_value="output/dataset.tsv")
    cli.main(["collect"])
    stage.assert_called_once()
    config, out = stage.call_args.args
    assert out == "output"
    assert config.collect.duration_s == 12_000.0
    assert (tmp_path / "output").is_dir()
