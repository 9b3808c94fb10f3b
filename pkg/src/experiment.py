"""
Experiment
Runs the four model families over a dataset, persists checkpoints, loss
traces and reports into a bundle, and resumes from the completion manifest
"""

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd
from joblib import Parallel, delayed

from data.synth_asset import WellScenario, generate_from_config, read_well_metadata, write_well_metadata
from data.well_data import (
    AssetDataset,
    Split,
    assign_splits,
    fit_scaler,
    load_dataset,
    load_splits,
    save_dataset,
    save_splits,
)
from src import __version__
from src.config import ExperimentConfig, ScenarioConfig, config_hash, derive_seed, load_scenario_config
from src.evaluation import ablation_report, build_report, emit_plot_data, write_report
from src.training import Family, TaskData, select_and_fit, task_data
from src.vfm_models import AnyModel, CheckpointError, Variant, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

DEFAULT_SCENARIO = Path(__file__).resolve().parent.parent / "data" / "default_scenario.toml"
MANIFEST = "manifest.json"
DATASET_FILE = "data/dataset.csv"
SPLITS_FILE = "data/splits.csv"
WELLS_FILE = "data/wells.csv"
TRACKED_PACKAGES = ("numpy", "pandas", "scipy", "scikit-learn", "joblib", "pydantic")

# Choices the reports are built on, recorded in every summary
REPORT_NOTES = {
    "scaler_scope": "one scaler per experiment, fitted on the development set of all wells",
    "rmse_trimming": "table 2 RMSE is trimmed like MAPE",
    "final_training": "final networks retrain from scratch for search + final epochs on train and validation",
    "gamma_regularization": "gamma is penalized with the task-parameter factor",
    "week_buckets": "whole weeks since the last development point, floor((t - t_dev) / 7)",
}


class ExperimentError(Exception):
    """Base error for experiment orchestration"""


@dataclass(frozen=True)
class ModelJob:
    key: str
    family: Family
    well_ids: Tuple[str, ...]


def package_versions() -> Dict[str, str]:
    versions = {"vfm-lab": __version__}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


def plan_jobs(dataset: AssetDataset, kinds: Sequence[str]) -> List[ModelJob]:
    """stl models per well, one mtl-asset per asset, one mtl-universal"""
    jobs = []
    for kind in kinds:
        if kind in ("stl-gbt", "stl-ann"):
            jobs += [ModelJob(f"{kind}__{w}", Family(kind), (w,)) for w in dataset.well_ids]
        elif kind == "mtl-asset":
            jobs += [ModelJob(f"mtl-asset__{a}", Family(kind), tuple(wells))
                     for a, wells in dataset.get_wells_by_asset().items()]
        elif kind == "mtl-universal":
            jobs.append(ModelJob("mtl-universal", Family(kind), tuple(dataset.well_ids)))
        else:
            raise ExperimentError(f"unknown model kind {kind!r}")
    return jobs


# --- bundle ------------------------------------------------------------------------------

@dataclass
class Bundle:
    """Artifact directory: checkpoints/, traces/, reports/, data/ and manifest.json"""
    root: Path
    manifest: Dict[str, Any] = field(default_factory=dict)

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST

    def checkpoint_path(self, key: str) -> Path:
        return self.root / "checkpoints" / f"{key}.json"

    def trace_path(self, key: str) -> Path:
        return self.root / "traces" / f"{key}.csv"

    @property
    def reports_dir(self) -> Path:
        return self.root / "reports"

    @classmethod
    def open(cls, root) -> "Bundle":
        root = Path(root)
        bundle = cls(root)
        if bundle.manifest_path.exists():
            bundle.manifest = json.loads(bundle.manifest_path.read_text(encoding="utf-8"))
        return bundle

    def save_manifest(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        tmp = self.manifest_path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(self.manifest, indent=2, sort_keys=True), encoding="utf-8")
        tmp.replace(self.manifest_path)

    def completed(self, run_hash: str) -> Dict[str, Dict[str, Any]]:
        if self.manifest.get("run_hash") != run_hash:
            return {}
        return {
            key: entry for key, entry in self.manifest.get("models", {}).items()
            if entry.get("success") and self.checkpoint_path(key).exists()
        }


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_trace(path: Path, train_trace: Sequence[float], val_trace: Sequence[float]) -> Path:
    n = max(len(train_trace), len(val_trace))
    frame = pd.DataFrame({
        "epoch": range(n),
        "train_loss": list(train_trace) + [float("nan")] * (n - len(train_trace)),
        "val_loss": list(val_trace) + [float("nan")] * (n - len(val_trace)),
    })
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.10g")
    return path


# --- data -----------------------------------------------------------------------------------

def prepare_dataset(config: ExperimentConfig, data_path: Optional[str] = None,
                    n_jobs: int = 1) -> Tuple[AssetDataset, Union[Path, List[WellScenario], None]]:
    """Load the configured CSV or generate one from the scenario; also returns the well metadata source"""
    data_path = data_path or config.dataset
    if data_path:
        dataset = load_dataset(data_path)
        sidecar = Path(data_path).with_name("wells.csv")
        return dataset, sidecar if sidecar.exists() else None
    scenario = load_scenario_config(config.scenario or DEFAULT_SCENARIO)
    dataset, scenarios = generate_from_config(scenario, n_jobs=n_jobs)
    return dataset, scenarios


def generate_dataset(scenario: ScenarioConfig, out_path, n_jobs: int = 1) -> Dict[str, Any]:
    """
    Simulate the scenario into ``out_path`` with a wells.csv sidecar and a
    generation manifest next to it

    Only the manifest carries a timestamp; the CSVs depend on the config alone.
    """
    out_path = Path(out_path)
    dataset, scenarios = generate_from_config(scenario, n_jobs=n_jobs)
    save_dataset(dataset, out_path)
    wells_path = write_well_metadata(scenarios, out_path.with_name("wells.csv"))
    manifest_path = out_path.with_name(f"{out_path.stem}.manifest.json")
    manifest = {
        "config_hash": config_hash(scenario),
        "config": scenario.model_dump(mode="json"),
        "seed": scenario.seed,
        "versions": package_versions(),
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "n_observations": len(dataset),
        "wells": {a: wells for a, wells in dataset.get_wells_by_asset().items()},
        "outputs": {"dataset": out_path.name, "wells": wells_path.name},
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    logger.info("Generated %d observations for %d wells into %s", len(dataset), len(dataset.well_ids), out_path)
    return {"success": True, "dataset": str(out_path), "wells": str(wells_path), "manifest": str(manifest_path),
            "n_observations": len(dataset), "n_wells": len(dataset.well_ids)}


def _split_dataset(dataset: AssetDataset, config: ExperimentConfig) -> AssetDataset:
    split = config.split
    return assign_splits(dataset, derive_seed(config.seed, "split"), split.max_gap_days, split.frac_cap,
                         split.count_cap, split.block_days, split.val_fraction)


# --- training ---------------------------------------------------------------------------------

def _task_sets(dataset: AssetDataset, well_ids: Sequence[str], scaler) -> Tuple[TaskData, TaskData, TaskData]:
    return (
        task_data(dataset, dataset.indices_with([Split.TRAIN], well_ids), scaler),
        task_data(dataset, dataset.indices_with([Split.VALIDATION], well_ids), scaler),
        task_data(dataset, dataset.development_indices(well_ids), scaler),
    )


def run_job(job: ModelJob, dataset: AssetDataset, config: ExperimentConfig, bundle_root: str) -> Dict[str, Any]:
    """Train one model end to end; never raises, returns a status entry"""
    bundle = Bundle(Path(bundle_root))
    started = time.perf_counter()
    try:
        train_data, val_data, development = _task_sets(dataset, job.well_ids, dataset.scaler)
        seed = derive_seed(config.seed, "model", job.key)
        trained, results = select_and_fit(job.family, train_data, val_data, development, config.grid, seed,
                                          dataset.scaler, list(job.well_ids))
        trained.model.meta.update({"key": job.key, "seed": seed})
        wall = time.perf_counter() - started
        save_checkpoint(trained.model, bundle.checkpoint_path(job.key))
        write_trace(bundle.trace_path(job.key), trained.train_trace, trained.val_trace)
        return {
            "key": job.key,
            "kind": job.family.kind,
            "wells": list(job.well_ids),
            "success": True,
            "error": None,
            "checkpoint": str(bundle.checkpoint_path(job.key).relative_to(bundle.root)),
            "trace": str(bundle.trace_path(job.key).relative_to(bundle.root)),
            "wall_time": wall,
            "candidates": len(results),
        }
    except Exception as e:
        logger.error("%s failed: %s", job.key, e)
        return {
            "key": job.key,
            "kind": job.family.kind,
            "wells": list(job.well_ids),
            "success": False,
            "error": f"{type(e).__name__}: {e}",
            "wall_time": time.perf_counter() - started,
        }


def run_experiment(config: ExperimentConfig, out_dir, data_path: Optional[str] = None,
                   n_jobs: int = 1) -> Dict[str, Any]:
    """
    Train every requested model, then evaluate the bundle

    Returns {"success", "bundle", "models", "failures", "reports"}. A failed
    model is recorded in the manifest and does not stop the others. Models
    already completed under the same config and data are skipped.
    """
    bundle = Bundle.open(out_dir)
    bundle.root.mkdir(parents=True, exist_ok=True)

    dataset_file = bundle.root / DATASET_FILE
    if data_path or config.dataset or not dataset_file.exists():
        dataset, wells = prepare_dataset(config, data_path, n_jobs)
        save_dataset(dataset, dataset_file)
        if isinstance(wells, Path):
            (bundle.root / WELLS_FILE).write_bytes(wells.read_bytes())
        elif wells:
            write_well_metadata(wells, bundle.root / WELLS_FILE)
    dataset = load_dataset(dataset_file)
    dataset = _split_dataset(dataset, config)
    save_splits(dataset, bundle.root / SPLITS_FILE)
    dataset = dataset.with_scaler(fit_scaler(dataset))

    run_hash = hashlib.sha256((config_hash(config) + _file_digest(dataset_file)).encode()).hexdigest()
    done = bundle.completed(run_hash)
    if bundle.manifest.get("run_hash") not in (None, run_hash):
        logger.info("Config or data changed, retraining every model")
    bundle.manifest = {
        "run_hash": run_hash,
        "config_hash": config_hash(config),
        "config": config.model_dump(mode="json"),
        "seed": config.seed,
        "versions": package_versions(),
        "models": dict(done),
        "outputs": {"dataset": DATASET_FILE, "splits": SPLITS_FILE},
    }
    bundle.save_manifest()

    jobs = [job for job in plan_jobs(dataset, config.models) if job.key not in done]
    if done:
        logger.info("Resuming: %d models already complete, %d to train", len(done), len(jobs))
    runner = Parallel(n_jobs=n_jobs, return_as="generator")
    for entry in runner(delayed(run_job)(job, dataset, config, str(bundle.root)) for job in jobs):
        entry["completed_at"] = time.strftime("%Y-%m-%dT%H:%M:%S")
        bundle.manifest["models"][entry["key"]] = entry
        bundle.save_manifest()
        logger.info("%s %s (%.1fs)", entry["key"], "done" if entry["success"] else "FAILED", entry["wall_time"])

    evaluation = evaluate_bundle(bundle.root)
    failures = {k: e["error"] for k, e in bundle.manifest["models"].items() if not e["success"]}
    return {
        "success": not failures and evaluation["success"],
        "bundle": str(bundle.root),
        "models": sorted(bundle.manifest["models"]),
        "failures": failures,
        "reports": evaluation.get("reports", []),
    }


# --- evaluation -------------------------------------------------------------------------------

def load_bundle_dataset(bundle: Bundle, data_path: Optional[str] = None) -> AssetDataset:
    dataset = load_dataset(data_path or bundle.root / DATASET_FILE)
    splits = bundle.root / SPLITS_FILE
    if splits.exists():
        dataset = load_splits(dataset, splits)
    elif "config" in bundle.manifest:
        dataset = _split_dataset(dataset, ExperimentConfig.model_validate(bundle.manifest["config"]))
    else:
        raise ExperimentError(f"{bundle.root} has no split labels")
    return dataset


def timing_summary(entries: Dict[str, Dict[str, Any]]) -> Dict[str, float]:
    totals: Dict[str, float] = {}
    for entry in entries.values():
        if entry.get("success"):
            totals[entry["kind"]] = totals.get(entry["kind"], 0.0) + float(entry.get("wall_time", 0.0))
    return totals


def evaluate_bundle(root, data_path: Optional[str] = None) -> Dict[str, Any]:
    """
    Evaluate every checkpoint listed in the manifest

    Missing or unreadable checkpoints go to reports/failures.json; the rest
    are still evaluated. Report files carry no timestamps or timings.
    """
    bundle = Bundle.open(root)
    dataset = load_bundle_dataset(bundle, data_path)
    entries = bundle.manifest.get("models", {})
    models: Dict[str, AnyModel] = {}
    failures: Dict[str, str] = {}
    for key in sorted(entries):
        entry = entries[key]
        if not entry.get("success"):
            failures[key] = entry.get("error") or "training failed"
            continue
        try:
            models[key] = load_checkpoint(bundle.checkpoint_path(key))
        except CheckpointError as e:
            failures[key] = str(e)
    bundle.reports_dir.mkdir(parents=True, exist_ok=True)
    failure_path = bundle.reports_dir / "failures.json"
    failure_path.write_text(json.dumps(failures, indent=2, sort_keys=True), encoding="utf-8")
    if not models:
        logger.error("No usable checkpoints in %s", bundle.root)
        return {"success": False, "reports": [str(failure_path)], "failures": failures}

    config = ExperimentConfig.model_validate(bundle.manifest["config"]) if "config" in bundle.manifest else ExperimentConfig()
    producer_types = None
    if (bundle.root / WELLS_FILE).exists():
        producer_types = {s.well_id: s.producer_type for s in read_well_metadata(bundle.root / WELLS_FILE)}
    report = build_report(models, dataset, config.sensitivity_delta_p1, meta={"notes": REPORT_NOTES, "models": sorted(models)})
    written = write_report(report, bundle.reports_dir)
    written += emit_plot_data(report, dataset, models, bundle.reports_dir, config.sweep_wells, config.sweep_points,
                              producer_types)
    written.append(failure_path)

    bundle.manifest["timings"] = timing_summary(entries)
    bundle.manifest.setdefault("outputs", {})["reports"] = sorted(str(p.relative_to(bundle.root)) for p in written)
    bundle.save_manifest()
    logger.info("Wrote %d report files to %s", len(written), bundle.reports_dir)
    return {"success": not failures, "reports": [str(p) for p in written], "failures": failures}


# --- ablation ------------------------------------------------------------------------------------

def run_ablation(config: ExperimentConfig, out_dir, data_path: Optional[str] = None,
                 seeds: Optional[Sequence[int]] = None, variants: Sequence[str] = tuple(v.value for v in Variant),
                 n_jobs: int = 1) -> Dict[str, Any]:
    """Variant table per seed plus the across-seed mean, written under reports/"""
    out_dir = Path(out_dir)
    dataset, _ = prepare_dataset(config, data_path, n_jobs)
    dataset = _split_dataset(dataset, config)
    seeds = list(seeds if seeds is not None else config.ablation_seeds)
    table = ablation_report(dataset, [derive_seed(s, "ablation") for s in seeds], config.grid,
                            [Variant(v) for v in variants], n_jobs)
    labels = {str(derive_seed(s, "ablation")): str(s) for s in seeds}
    table["seed"] = table["seed"].map(lambda s: labels.get(s, s))
    reports = out_dir / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    written = []
    for seed in seeds:
        path = reports / f"table5_ablation_seed{seed}.csv"
        table[table["seed"] == str(seed)].to_csv(path, index=False, float_format="%.10g")
        written.append(path)
    path = reports / "table5_ablation.csv"
    table.to_csv(path, index=False, float_format="%.10g")
    written.append(path)
    return {"success": True, "table": table, "reports": [str(p) for p in written]}
