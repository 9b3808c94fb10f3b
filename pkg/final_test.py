"""
Final benchmark for the VFM lab
Directional checks on the default synthetic asset over three root seeds:
multi-task models respond to upstream pressure more reliably than
single-task networks, do not lose accuracy on later test points, and the
complete universal model beats its bare ablation.

Every seed trains with the ``quick`` grid preset (one configuration per
model family) rather than the full hyperparameter search, so the checks
compare model families by direction and majority over seeds only. They do
not reproduce the error magnitudes a full search reaches.

Slow; deselected by default. Run with ``pytest final_test.py -m slow`` or
``python final_test.py`` for a printed summary.
"""

import tempfile
from pathlib import Path

import pandas as pd
import pytest

from src.config import ExperimentConfig, load_scenario_config
from src.experiment import DEFAULT_SCENARIO, generate_dataset, run_ablation, run_experiment

SEEDS = (0, 1, 2)
MAJORITY = 2


def benchmark_config(seed: int) -> ExperimentConfig:
    return ExperimentConfig.model_validate({"seed": seed, "grid": {"preset": "quick"}})


def run_seed(seed: int, root: Path) -> dict:
    """Generate the default asset under ``seed``, train all four families and return the report frames"""
    scenario = load_scenario_config(DEFAULT_SCENARIO).model_copy(update={"seed": seed})
    data = generate_dataset(scenario, root / "data" / "asset.csv")["dataset"]
    result = run_experiment(benchmark_config(seed), root / "bundle", data_path=data)
    reports = root / "bundle" / "reports"
    return {
        "result": result,
        "data": data,
        "wells": pd.read_csv(reports / "well_metrics.csv"),
        "weeks": pd.read_csv(reports / "fig6_error_by_week.csv"),
    }


def mean_by_kind(wells: pd.DataFrame, column: str) -> dict:
    return wells.groupby("kind")[column].mean().to_dict()


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    return {seed: run_seed(seed, tmp_path_factory.mktemp(f"seed{seed}")) for seed in SEEDS}


def test_benchmark_runs_one_configuration_per_family():
    grid = benchmark_config(0).grid
    assert grid.preset == "quick"
    assert all(len(getattr(grid, name)) == 1 for name in ("m_l", "stl_m_h", "mtl_m_h", "lam", "m_beta", "lam_t"))


@pytest.mark.slow
def test_every_model_trains(benchmark):
    for seed, run in benchmark.items():
        assert run["result"]["success"], (seed, run["result"]["failures"])
        assert set(run["wells"]["kind"]) == {"stl-gbt", "stl-ann", "mtl-asset", "mtl-universal"}
        assert run["wells"]["well_id"].nunique() == 12


@pytest.mark.slow
def test_test_sets_reach_past_six_weeks(benchmark):
    for run in benchmark.values():
        assert run["weeks"]["week"].max() >= 8


@pytest.mark.slow
def test_universal_model_is_more_pressure_sensitive(benchmark):
    wins = 0
    for run in benchmark.values():
        sensitivity = mean_by_kind(run["wells"], "sensitivity")
        wins += sensitivity["mtl-universal"] < sensitivity["stl-ann"]
    assert wins >= MAJORITY


@pytest.mark.slow
def test_multi_task_error_not_worse_than_single_task(benchmark):
    wins = 0
    for run in benchmark.values():
        mape = mean_by_kind(run["wells"], "mape")
        wins += min(mape["mtl-asset"], mape["mtl-universal"]) <= mape["stl-ann"]
    assert wins >= MAJORITY


@pytest.mark.slow
def test_complete_model_beats_bare_ablation(benchmark, tmp_path):
    data = benchmark[SEEDS[0]]["data"]
    result = run_ablation(benchmark_config(SEEDS[0]), tmp_path, data_path=data, seeds=list(SEEDS),
                          variants=["full", "no-beta-no-gamma"])
    table = result["table"]
    per_seed = table[table["seed"] != "mean"].pivot(index="seed", columns="variant", values="mean_trimmed_mape")
    wins = int((per_seed["full"] <= per_seed["no-beta-no-gamma"]).sum())
    assert wins >= MAJORITY


def run_benchmark():
    """Train the benchmark for every seed and print the headline numbers"""
    print("VFM Lab: multi-task virtual flow metering benchmark")
    print("=" * 70)
    with tempfile.TemporaryDirectory() as tmp:
        for seed in SEEDS:
            run = run_seed(seed, Path(tmp) / f"seed{seed}")
            mape = mean_by_kind(run["wells"], "mape")
            sensitivity = mean_by_kind(run["wells"], "sensitivity")
            print(f"\nSeed {seed}")
            print("-" * 70)
            for kind in ("stl-gbt", "stl-ann", "mtl-asset", "mtl-universal"):
                print(f"  {kind:<14} trimmed MAPE {mape.get(kind, float('nan')):7.2f}%"
                      f"   mean S {sensitivity.get(kind, float('nan')):.3f}")
            for key, error in run["result"]["failures"].items():
                print(f"  FAILED {key}: {error}")
    print("\n" + "=" * 70)


if __name__ == "__main__":
    run_benchmark()
