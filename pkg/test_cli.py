"""
Tests for the command-line entry point and its exit codes
"""

import json

import pytest

from run import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, build_parser, experiment_config, main

SMALL_SCENARIO = """\
seed = 3
horizon_days = 300

[[assets]]
asset_id = "A1"
n_wells = 2
"""


@pytest.fixture
def scenario_file(tmp_path):
    path = tmp_path / "scenario.toml"
    path.write_text(SMALL_SCENARIO)
    return path


def test_missing_command_is_a_usage_error(capsys):
    assert main([]) == EXIT_VALIDATION
    assert "required" in capsys.readouterr().err


def test_unknown_model_kind_is_rejected(capsys):
    assert main(["train", "--models", "stl-ann,stl-svm"]) == EXIT_VALIDATION
    assert "stl-svm" in capsys.readouterr().err


def test_unknown_grid_preset_is_rejected():
    assert main(["train", "--grid", "huge"]) == EXIT_VALIDATION


def test_invalid_config_reports_line(tmp_path, capsys):
    path = tmp_path / "bad.toml"
    path.write_text('seed = 1\nhorizon_days = -5\n\n[[assets]]\nasset_id = "A1"\nn_wells = 1\n')
    assert main(["generate", "--config", str(path)]) == EXIT_VALIDATION
    err = capsys.readouterr().err
    assert f"{path}:2" in err
    assert "horizon_days" in err


def test_generate_writes_dataset_and_manifest(scenario_file, tmp_path, capsys):
    out = tmp_path / "out" / "asset.csv"
    assert main(["generate", "--config", str(scenario_file), "--out", str(out), "--jobs", "1"]) == EXIT_OK
    assert out.exists()
    assert (out.parent / "wells.csv").exists()
    manifest = json.loads((out.parent / "asset.manifest.json").read_text())
    assert manifest["seed"] == 3
    assert "2 wells" in capsys.readouterr().out


def test_generate_seed_override_changes_data(scenario_file, tmp_path):
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    main(["generate", "--config", str(scenario_file), "--out", str(first), "--jobs", "1"])
    main(["generate", "--config", str(scenario_file), "--out", str(second), "--seed", "4", "--jobs", "1"])
    assert first.read_bytes() != second.read_bytes()
    assert json.loads((tmp_path / "b.manifest.json").read_text())["seed"] == 4


def test_generate_uses_output_root_from_environment(scenario_file, tmp_path, monkeypatch):
    monkeypatch.setenv("VFM_OUTPUT_ROOT", str(tmp_path / "runs"))
    assert main(["generate", "--config", str(scenario_file), "--jobs", "1"]) == EXIT_OK
    assert (tmp_path / "runs" / "dataset.csv").exists()


def test_infeasible_scenario_is_a_runtime_failure(tmp_path, capsys):
    path = tmp_path / "infeasible.toml"
    path.write_text(SMALL_SCENARIO + "target_fraction = [1.5, 1.6]\n")
    assert main(["generate", "--config", str(path), "--out", str(tmp_path / "x.csv"), "--jobs", "1"]) == EXIT_RUNTIME
    assert "ScenarioInfeasible" in capsys.readouterr().err


def test_train_and_evaluate_tree_baseline(scenario_file, tmp_path):
    data = tmp_path / "asset.csv"
    bundle = tmp_path / "bundle"
    assert main(["generate", "--config", str(scenario_file), "--out", str(data), "--jobs", "1"]) == EXIT_OK
    code = main(["train", "--data", str(data), "--models", "stl-gbt", "--grid", "quick", "--out", str(bundle),
                 "--jobs", "1"])
    assert code == EXIT_OK
    manifest = json.loads((bundle / "manifest.json").read_text())
    assert sorted(manifest["models"]) == ["stl-gbt__W01", "stl-gbt__W02"]
    assert manifest["config"]["grid"]["preset"] == "quick"
    assert main(["evaluate", "--bundle", str(bundle)]) == EXIT_OK
    assert (bundle / "reports" / "table1_error_overview.csv").exists()


def test_evaluate_missing_bundle_fails():
    assert main(["evaluate", "--bundle", "/nonexistent/bundle"]) == EXIT_RUNTIME


def test_command_line_overrides_config(tmp_path):
    path = tmp_path / "experiment.toml"
    path.write_text('seed = 5\nmodels = ["stl-ann"]\n\n[grid]\npreset = "full"\nlam = [0.5]\n')
    args = build_parser().parse_args(["train", "--config", str(path), "--seed", "9", "--grid", "quick"])
    config = experiment_config(args)
    assert config.seed == 9
    assert config.models == ["stl-ann"]
    assert config.grid.preset == "quick" and config.grid.lam == [1e-4]
