"""
End-to-end tests for dataset generation, bundle training, resume and evaluation
"""

import json

import pandas as pd
import pytest

from data.well_data import Split, fit_scaler, load_dataset, load_splits
from src.config import ExperimentConfig, load_scenario_config
from src.experiment import (
    DEFAULT_SCENARIO,
    Bundle,
    ExperimentError,
    ModelJob,
    evaluate_bundle,
    generate_dataset,
    plan_jobs,
    run_ablation,
    run_experiment,
    run_job,
)
from src.training import Family


def small_scenario(horizon_days=300.0, wells_per_asset=2):
    scenario = load_scenario_config(DEFAULT_SCENARIO)
    assets = [a.model_copy(update={"n_wells": wells_per_asset}) for a in scenario.assets]
    return scenario.model_copy(update={"horizon_days": horizon_days, "assets": assets})


def quick_config(**overrides):
    values = {"models": ["stl-gbt", "mtl-universal"], "grid": {"preset": "quick"}, "split": {"block_days": 30.0}}
    values.update(overrides)
    return ExperimentConfig.model_validate(values)


@pytest.fixture(scope="module")
def dataset_csv(tmp_path_factory):
    out = tmp_path_factory.mktemp("generated") / "asset.csv"
    result = generate_dataset(small_scenario(), out)
    assert result["success"]
    return out


@pytest.fixture(scope="module")
def bundle(tmp_path_factory, dataset_csv):
    root = tmp_path_factory.mktemp("bundle")
    result = run_experiment(quick_config(), root, data_path=str(dataset_csv))
    return root, result


def test_generate_dataset_writes_csv_sidecar_and_manifest(dataset_csv, tmp_path):
    manifest = json.loads(dataset_csv.with_name("asset.manifest.json").read_text())
    assert manifest["n_observations"] == len(load_dataset(dataset_csv))
    assert manifest["wells"] == {"A1": ["W01", "W02"], "A2": ["W03", "W04"]}
    assert dataset_csv.with_name("wells.csv").exists()
    again = tmp_path / "asset.csv"
    generate_dataset(small_scenario(), again)
    assert again.read_bytes() == dataset_csv.read_bytes()


def test_plan_jobs_keys(dataset_csv):
    dataset = load_dataset(dataset_csv)
    jobs = plan_jobs(dataset, ["stl-gbt", "stl-ann", "mtl-asset", "mtl-universal"])
    assert [job.key for job in jobs] == (
        [f"stl-gbt__W0{i}" for i in range(1, 5)] + [f"stl-ann__W0{i}" for i in range(1, 5)]
        + ["mtl-asset__A1", "mtl-asset__A2", "mtl-universal"]
    )
    assert jobs[-2].well_ids == ("W03", "W04")
    with pytest.raises(ExperimentError):
        plan_jobs(dataset, ["stl-svm"])


def test_run_experiment_writes_bundle(bundle):
    root, result = bundle
    assert result["success"], result["failures"]
    assert result["models"] == ["mtl-universal", "stl-gbt__W01", "stl-gbt__W02", "stl-gbt__W03", "stl-gbt__W04"]
    manifest = json.loads((root / "manifest.json").read_text())
    for key, entry in manifest["models"].items():
        assert entry["success"]
        assert (root / entry["checkpoint"]).exists()
        trace = pd.read_csv(root / entry["trace"])
        assert trace["train_loss"].notna().any()
    assert set(manifest["timings"]) == {"stl-gbt", "mtl-universal"}
    assert manifest["outputs"]["splits"] == "data/splits.csv"
    reports = root / "reports"
    for name in ("table1_error_overview.csv", "table2_well_errors.csv", "table3_asset_errors.csv",
                 "table4_sensitivity.csv", "table7_model_complexity.csv", "summary.json", "failures.json",
                 "fig8_beta_scatter.csv"):
        assert (reports / name).exists(), name
    assert json.loads((reports / "failures.json").read_text()) == {}
    overview = pd.read_csv(reports / "table1_error_overview.csv")
    assert list(overview["kind"]) == ["stl-gbt", "mtl-universal"]


def test_splits_are_persisted_with_every_label(bundle):
    root, _ = bundle
    dataset = load_splits(load_dataset(root / "data" / "dataset.csv"), root / "data" / "splits.csv")
    labels = set(dataset.split_labels)
    assert labels == {Split.TRAIN, Split.VALIDATION, Split.TEST}


def test_resume_skips_completed_models_and_reproduces_reports(bundle, dataset_csv):
    root, _ = bundle
    before = json.loads((root / "manifest.json").read_text())
    tables = {p.name: p.read_bytes() for p in (root / "reports").glob("table*.csv")}
    result = run_experiment(quick_config(), root)
    after = json.loads((root / "manifest.json").read_text())
    assert result["success"]
    for key, entry in before["models"].items():
        assert after["models"][key]["completed_at"] == entry["completed_at"]
    assert after["run_hash"] == before["run_hash"]
    for name, content in tables.items():
        assert (root / "reports" / name).read_bytes() == content, name


def test_missing_checkpoint_is_reported_not_fatal(bundle, tmp_path):
    root, _ = bundle
    copy = tmp_path / "bundle"
    for path in root.rglob("*"):
        if path.is_file():
            target = copy / path.relative_to(root)
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(path.read_bytes())
    Bundle.open(copy).checkpoint_path("stl-gbt__W02").unlink()
    result = evaluate_bundle(copy)
    assert not result["success"]
    assert set(result["failures"]) == {"stl-gbt__W02"}
    failures = json.loads((copy / "reports" / "failures.json").read_text())
    assert "stl-gbt__W02" in failures
    wells = pd.read_csv(copy / "reports" / "well_metrics.csv")
    assert "W02" not in set(wells[wells["kind"] == "stl-gbt"]["well_id"])
    assert "W02" in set(wells[wells["kind"] == "mtl-universal"]["well_id"])


def test_failed_job_returns_an_entry(dataset_csv, tmp_path):
    dataset = load_dataset(dataset_csv)
    dataset = dataset.with_scaler(fit_scaler(dataset))
    entry = run_job(ModelJob("stl-ann__W99", Family("stl-ann"), ("W99",)), dataset, quick_config(), str(tmp_path))
    assert entry["success"] is False
    assert entry["error"].startswith("KeyError")
    assert not (tmp_path / "checkpoints").exists()


def test_ablation_table_per_seed(dataset_csv, tmp_path):
    result = run_ablation(quick_config(), tmp_path, data_path=str(dataset_csv), seeds=[7],
                          variants=["full", "no-beta-no-gamma"])
    table = result["table"]
    assert list(table["seed"]) == ["7", "7", "mean", "mean"]
    assert list(table["variant"]) == ["full", "no-beta-no-gamma", "full", "no-beta-no-gamma"]
    assert (tmp_path / "reports" / "table5_ablation_seed7.csv").exists()
    assert (table["n_wells"] == 4).all()
