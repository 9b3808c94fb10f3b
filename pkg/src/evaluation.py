"""
Evaluation
Percentage errors, trimmed MAPE and RMSE, the upstream-pressure
sensitivity score, grouped percentile tables, ablation tables and
tidy plot data
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from data.well_data import AssetDataset, Split, assign_splits, feature_matrix, fit_scaler
from src.training import Family, select_and_fit, task_data
from src.vfm_models import MissingScaler, NetworkModel, Variant, param_count, shared_forward

logger = logging.getLogger(__name__)

PERCENTILES = (5, 25, 50, 75, 95)
STAT_COLUMNS = ["mean"] + [f"P{p:02d}" for p in PERCENTILES]
KIND_ORDER = ["stl-gbt", "stl-ann", "mtl-asset", "mtl-universal"]
TRIM_FRACTION = 0.05


class EvaluationError(Exception):
    """Base error for metrics and reports"""


class NonPositiveTruth(EvaluationError, ValueError):
    pass


class EmptyErrors(EvaluationError, ValueError):
    pass


# --- metrics -----------------------------------------------------------------------------

def percentage_error(pred, truth) -> np.ndarray:
    """100 * (pred - truth) / truth"""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if np.any(truth <= 0):
        raise NonPositiveTruth("percentage error needs strictly positive true rates")
    return 100.0 * (pred - truth) / truth


def _trimmed(errors, trim_fraction: float) -> np.ndarray:
    values = np.sort(np.abs(np.asarray(errors, dtype=float)).ravel())
    if values.size == 0:
        raise EmptyErrors("no errors to summarize")
    drop = math.ceil(trim_fraction * values.size)
    keep = max(values.size - drop, 1)
    return values[:keep]


def trimmed_mape(errors, trim_fraction: float = TRIM_FRACTION) -> float:
    """Mean |e| after dropping the ceil(5%) largest; at least one value is kept"""
    return float(np.mean(_trimmed(errors, trim_fraction)))


def rmse(errors, trim: bool = False, trim_fraction: float = TRIM_FRACTION) -> float:
    values = _trimmed(errors, trim_fraction) if trim else np.asarray(errors, dtype=float).ravel()
    if values.size == 0:
        raise EmptyErrors("no errors to summarize")
    return float(np.sqrt(np.mean(values ** 2)))


def summarize(values) -> Dict[str, float]:
    """Mean and the 5/25/50/75/95 percentiles"""
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0:
        raise EmptyErrors("no values to summarize")
    stats = {"mean": float(np.mean(values))}
    for p, q in zip(PERCENTILES, np.percentile(values, PERCENTILES)):
        stats[f"P{p:02d}"] = float(q)
    return stats


def _predict_physical(model, X: np.ndarray, well_ids: Sequence[str], scaler=None) -> np.ndarray:
    own = getattr(model, "scaler", None)
    if hasattr(model, "scaler") and own is None:
        if scaler is None:
            raise MissingScaler(f"{getattr(model, 'kind', 'model')} needs a scaler for physical perturbations")
        if isinstance(model, NetworkModel):
            return scaler.invert("Q", model.predict_scaled(scaler.transform_features(X), well_ids))
        raise MissingScaler("model has no scaler attached")
    return model.predict(X, well_ids)


def sensitivity_score(model, X, well_ids: Sequence[str], delta_p1: float = 10.0,
                      scaler=None) -> Tuple[np.ndarray, Dict[str, float]]:
    """
    Per-point s (0 when raising p1 by ``delta_p1`` bar strictly raises Q, else 1)
    and per-well S = mean s
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    bumped = X.copy()
    bumped[:, 1] += delta_p1
    base = _predict_physical(model, X, well_ids, scaler)
    raised = _predict_physical(model, bumped, well_ids, scaler)
    s = np.where(raised - base > 0, 0.0, 1.0)
    per_well: Dict[str, List[float]] = {}
    for well_id, value in zip(well_ids, s):
        per_well.setdefault(well_id, []).append(value)
    return s, {w: float(np.mean(v)) for w, v in per_well.items()}


# --- predictions -------------------------------------------------------------------------------

def last_development_time(dataset: AssetDataset) -> Dict[str, float]:
    last = {}
    for well_id in dataset.wells:
        times = [dataset.observations[i].t for i in dataset.development_indices([well_id])]
        if times:
            last[well_id] = max(times)
    return last


def collect_predictions(models: Mapping[str, Any], dataset: AssetDataset, split: Split = Split.TEST,
                        delta_p1: float = 10.0) -> pd.DataFrame:
    """
    One row per (model, test observation): truth, prediction, signed and
    absolute percentage error, weeks since the well's last development point
    and the sensitivity indicator s
    """
    last_dev = last_development_time(dataset)
    frames = []
    for key, model in models.items():
        indices = dataset.indices_with([split], model.well_ids)
        if not indices:
            continue
        observations = [dataset.observations[i] for i in indices]
        X = feature_matrix(observations)
        well_ids = [o.well_id for o in observations]
        truth = np.array([o.Q for o in observations])
        pred = model.predict(X, well_ids)
        s, _ = sensitivity_score(model, X, well_ids, delta_p1)
        errors = percentage_error(pred, truth)
        frames.append(pd.DataFrame({
            "model_key": key,
            "kind": model.kind,
            "well_id": well_ids,
            "asset_id": [o.asset_id for o in observations],
            "t": [o.t for o in observations],
            "q_true": truth,
            "q_pred": pred,
            "error": errors,
            "abs_error": np.abs(errors),
            "weeks_since_train": [int((o.t - last_dev.get(o.well_id, o.t)) // 7) for o in observations],
            "s": s,
        }))
    if not frames:
        return pd.DataFrame(columns=["model_key", "kind", "well_id", "asset_id", "t", "q_true", "q_pred",
                                     "error", "abs_error", "weeks_since_train", "s"])
    return pd.concat(frames, ignore_index=True)


def well_metrics(predictions: pd.DataFrame) -> pd.DataFrame:
    """Per (kind, well): trimmed MAPE, trimmed RMSE, untrimmed RMSE and S"""
    rows = []
    for (kind, well_id, asset_id), group in predictions.groupby(["kind", "well_id", "asset_id"], sort=True):
        rows.append({
            "kind": kind,
            "well_id": well_id,
            "asset_id": asset_id,
            "n_test": len(group),
            "mape": trimmed_mape(group["error"]),
            "rmse": rmse(group["error"], trim=True),
            "rmse_untrimmed": rmse(group["error"]),
            "sensitivity": float(group["s"].mean()),
        })
    return pd.DataFrame(rows, columns=["kind", "well_id", "asset_id", "n_test", "mape", "rmse",
                                       "rmse_untrimmed", "sensitivity"])


def _kind_sorted(frame: pd.DataFrame, extra: Sequence[str] = ()) -> pd.DataFrame:
    order = {k: i for i, k in enumerate(KIND_ORDER)}
    keys = ["_order"] + list(extra)
    frame = frame.assign(_order=frame["kind"].map(lambda k: order.get(k, len(order))))
    return frame.sort_values(keys, kind="stable").drop(columns="_order").reset_index(drop=True)


def aggregate_report(predictions: pd.DataFrame, grouping: str = "overall",
                     wells: Optional[pd.DataFrame] = None) -> pd.DataFrame:
    """
    Mean and percentiles per model kind and group

    overall: |e| over all test points; well: per-well trimmed MAPE and RMSE
    (one row per metric); asset: per-well trimmed MAPE within each asset;
    week: |e| by whole weeks since the last development point.
    """
    rows = []
    if grouping == "overall":
        for kind, group in predictions.groupby("kind"):
            rows.append({"kind": kind, **summarize(group["abs_error"])})
        return _kind_sorted(pd.DataFrame(rows, columns=["kind"] + STAT_COLUMNS))
    if grouping == "week":
        for (kind, week), group in predictions.groupby(["kind", "weeks_since_train"]):
            rows.append({"kind": kind, "week": int(week), "n": len(group), **summarize(group["abs_error"])})
        return _kind_sorted(pd.DataFrame(rows, columns=["kind", "week", "n"] + STAT_COLUMNS), ["week"])
    wells = well_metrics(predictions) if wells is None else wells
    if grouping == "well":
        for metric in ("mape", "rmse"):
            for kind, group in wells.groupby("kind"):
                rows.append({"metric": metric, "kind": kind, **summarize(group[metric])})
        frame = pd.DataFrame(rows, columns=["metric", "kind"] + STAT_COLUMNS)
        return _kind_sorted(frame, []).sort_values(["metric"], kind="stable").reset_index(drop=True)
    if grouping == "asset":
        for (kind, asset_id), group in wells.groupby(["kind", "asset_id"]):
            rows.append({"kind": kind, "asset_id": asset_id, "n_wells": len(group), **summarize(group["mape"])})
        return _kind_sorted(pd.DataFrame(rows, columns=["kind", "asset_id", "n_wells"] + STAT_COLUMNS), ["asset_id"])
    raise EvaluationError(f"unknown grouping {grouping!r}")


def sensitivity_table(wells: pd.DataFrame) -> pd.DataFrame:
    frame = wells.groupby("kind", as_index=False)["sensitivity"].mean()
    return _kind_sorted(frame.rename(columns={"sensitivity": "mean_sensitivity"}))


def sensitivity_change(wells: pd.DataFrame, reference: str = "stl-ann") -> pd.DataFrame:
    """Wells with better, unchanged or worse S than the reference kind"""
    ref = wells[wells["kind"] == reference].set_index("well_id")["sensitivity"]
    rows = []
    for kind, group in wells[wells["kind"] != reference].groupby("kind"):
        paired = group.set_index("well_id")["sensitivity"].reindex(ref.index).dropna()
        delta = paired - ref.loc[paired.index]
        rows.append({
            "kind": kind,
            "better": int((delta < 0).sum()),
            "unchanged": int((delta == 0).sum()),
            "worse": int((delta > 0).sum()),
        })
    return _kind_sorted(pd.DataFrame(rows, columns=["kind", "better", "unchanged", "worse"]))


def complexity_table(models: Mapping[str, Any]) -> pd.DataFrame:
    """Model counts and trainable parameters per kind; trees report NaN parameters"""
    rows: Dict[str, Dict[str, Any]] = {}
    for model in models.values():
        row = rows.setdefault(model.kind, {"kind": model.kind, "models": 0, "parameters": 0.0, "leaves": 0})
        row["models"] += 1
        if isinstance(model, NetworkModel):
            row["parameters"] += param_count(model).total
        else:
            row["parameters"] = float("nan")
            booster = getattr(model, "booster", None)
            row["leaves"] += booster.n_leaves if booster is not None else 0
    return _kind_sorted(pd.DataFrame(list(rows.values()), columns=["kind", "models", "parameters", "leaves"]))


# --- report ------------------------------------------------------------------------------------

@dataclass
class EvaluationReport:
    predictions: pd.DataFrame
    wells: pd.DataFrame
    tables: Dict[str, pd.DataFrame] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)

    def table(self, name: str) -> pd.DataFrame:
        return self.tables[name]


def build_report(models: Mapping[str, Any], dataset: AssetDataset, delta_p1: float = 10.0,
                 meta: Optional[Dict[str, Any]] = None) -> EvaluationReport:
    predictions = collect_predictions(models, dataset, delta_p1=delta_p1)
    if predictions.empty:
        raise EmptyErrors("no test observations for any model")
    wells = well_metrics(predictions)
    tables = {
        "table1_error_overview": aggregate_report(predictions, "overall"),
        "table2_well_errors": aggregate_report(predictions, "well", wells),
        "table3_asset_errors": aggregate_report(predictions, "asset", wells),
        "table4_sensitivity": sensitivity_table(wells),
        "table7_model_complexity": complexity_table(models),
    }
    if (wells["kind"] == "stl-ann").any():
        tables["table6_sensitivity_change"] = sensitivity_change(wells)
    return EvaluationReport(predictions=predictions, wells=wells, tables=tables, meta=dict(meta or {}))


def _write_csv(frame: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.10g")
    return path


def write_report(report: EvaluationReport, out_dir) -> List[Path]:
    """One CSV per table, per-well metrics and summary.json"""
    out_dir = Path(out_dir)
    written = [_write_csv(frame, out_dir / f"{name}.csv") for name, frame in sorted(report.tables.items())]
    written.append(_write_csv(report.wells, out_dir / "well_metrics.csv"))
    summary = {
        "tables": sorted(report.tables),
        "mean_trimmed_mape": {
            k: float(v) for k, v in report.wells.groupby("kind")["mape"].mean().items()
        },
        "mean_sensitivity": {
            k: float(v) for k, v in report.wells.groupby("kind")["sensitivity"].mean().items()
        },
        **report.meta,
    }
    path = out_dir / "summary.json"
    path.write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
    written.append(path)
    return written


# --- plot data ---------------------------------------------------------------------------------

def _evenly_spaced(n_total: int, n_wanted: int) -> np.ndarray:
    if n_total <= n_wanted:
        return np.arange(n_total)
    return np.unique(np.linspace(0, n_total - 1, n_wanted).round().astype(int))


def sensitivity_sweep(models: Mapping[str, Any], dataset: AssetDataset, well_ids: Sequence[str],
                      n_points: int = 30, span: float = 20.0, steps: int = 9) -> pd.DataFrame:
    """Predicted Q while moving p1 around observed test points"""
    offsets = np.linspace(-span, span, steps)
    rows = []
    for key, model in models.items():
        for well_id in well_ids:
            if well_id not in model.well_ids:
                continue
            indices = dataset.indices_with([Split.TEST], [well_id])
            chosen = [indices[i] for i in _evenly_spaced(len(indices), n_points)]
            for point, idx in enumerate(chosen):
                obs = dataset.observations[idx]
                X = np.repeat(feature_matrix([obs]), steps, axis=0)
                X[:, 1] = np.maximum(obs.p1 + offsets, obs.p2)
                pred = model.predict(X, [well_id] * steps)
                for offset, p1, q in zip(offsets, X[:, 1], pred):
                    rows.append({"model_key": key, "kind": model.kind, "well_id": well_id, "point": point,
                                 "t": obs.t, "q_observed": obs.Q, "p1_observed": obs.p1,
                                 "p1_offset": float(offset), "p1": float(p1), "q_pred": float(q)})
    return pd.DataFrame(rows, columns=["model_key", "kind", "well_id", "point", "t", "q_observed",
                                       "p1_observed", "p1_offset", "p1", "q_pred"])


def beta_scatter(model: NetworkModel, dataset: AssetDataset,
                 producer_types: Optional[Mapping[str, str]] = None) -> pd.DataFrame:
    rows = []
    for i, well_id in enumerate(model.well_ids):
        row = {"well_id": well_id, "asset_id": dataset.asset_of(well_id) if well_id in dataset.wells else "",
               "producer_type": (producer_types or {}).get(well_id, "")}
        row.update({f"beta_{k + 1}": float(v) for k, v in enumerate(model.beta[i])})
        rows.append(row)
    return pd.DataFrame(rows)


def beta_grid(learned: np.ndarray, n_points: int = 5, min_half_width: float = 0.1) -> np.ndarray:
    """Evenly spaced values over the learned range of one task-parameter dimension"""
    lo, hi = float(np.min(learned)), float(np.max(learned))
    if hi - lo < 1e-12:
        lo, hi = lo - min_half_width, hi + min_half_width
    return np.linspace(lo, hi, n_points)


def beta_response(model: NetworkModel, dataset: AssetDataset, n_beta: int = 5,
                  psi_values=np.linspace(0.1, 0.9, 17)) -> pd.DataFrame:
    """
    Model output over adjusted choke values on a grid of (beta_1, beta_2)

    Each beta axis spans the values learned across the model's wells; the
    other inputs sit at the median development point.
    """
    m_beta = model.spec.m_beta
    if m_beta == 0 or model.scaler is None:
        return pd.DataFrame(columns=["beta_1", "beta_2", "psi", "q_pred"])
    development = dataset.development_indices(model.well_ids) or list(range(len(dataset)))
    X = model.scaler.transform_features(feature_matrix([dataset.observations[i] for i in development]))
    operating = np.median(X, axis=0)
    first = beta_grid(model.beta[:, 0], n_beta)
    second = beta_grid(model.beta[:, 1], n_beta) if m_beta >= 2 else [float("nan")]
    rows = []
    for b2 in second:
        for b1 in first:
            z = np.repeat(operating[None, :], len(psi_values), axis=0)
            z[:, 0] = psi_values
            beta = np.zeros((len(psi_values), m_beta))
            beta[:, 0] = b1
            if m_beta >= 2:
                beta[:, 1] = b2
            q = model.scaler.invert("Q", shared_forward(z, beta, model.weights, model.biases).data)
            for psi, value in zip(psi_values, q):
                rows.append({"beta_1": float(b1), "beta_2": float(b2), "psi": float(psi), "q_pred": float(value)})
    return pd.DataFrame(rows, columns=["beta_1", "beta_2", "psi", "q_pred"])


def emit_plot_data(report: EvaluationReport, dataset: AssetDataset, models: Mapping[str, Any], out_dir,
                   sweep_wells: Sequence[str] = (), sweep_points: int = 30,
                   producer_types: Optional[Mapping[str, str]] = None) -> List[Path]:
    """Tidy CSVs behind each figure"""
    out_dir = Path(out_dir)
    frame = dataset.to_frame()
    written = [
        _write_csv(frame[["well_id", "asset_id", "t", "u", "p1"]], out_dir / "fig3_choke_vs_pressure.csv"),
    ]
    boxes = []
    for (well_id, asset_id), group in frame.groupby(["well_id", "asset_id"], sort=True):
        lo, q1, med, q3, hi = np.percentile(group["p1"], [0, 25, 50, 75, 100])
        boxes.append({"well_id": well_id, "asset_id": asset_id, "min": lo, "P25": q1, "P50": med, "P75": q3, "max": hi})
    written.append(_write_csv(pd.DataFrame(boxes), out_dir / "fig4_pressure_boxes.csv"))
    written.append(_write_csv(frame[["well_id", "asset_id", "t", "split"]], out_dir / "fig5_split_timeline.csv"))
    written.append(_write_csv(aggregate_report(report.predictions, "week"), out_dir / "fig6_error_by_week.csv"))

    wells = list(sweep_wells) or dataset.well_ids[:2]
    sweep_models = {k: m for k, m in models.items() if m.kind in ("stl-ann", "mtl-universal")}
    written.append(_write_csv(sensitivity_sweep(sweep_models, dataset, wells, sweep_points),
                              out_dir / "fig7_sensitivity_sweep.csv"))

    universal = next((m for m in models.values() if m.kind == "mtl-universal" and isinstance(m, NetworkModel)), None)
    if universal is not None:
        written.append(_write_csv(beta_scatter(universal, dataset, producer_types), out_dir / "fig8_beta_scatter.csv"))
        written.append(_write_csv(beta_response(universal, dataset), out_dir / "fig9_beta_response.csv"))
    return written


# --- ablations ---------------------------------------------------------------------------------

def ablation_report(dataset: AssetDataset, seeds: Sequence[int], grid, variants: Sequence = tuple(Variant),
                    n_jobs: int = 1, split_seed: int = 0) -> pd.DataFrame:
    """
    Average trimmed MAPE of each universal-model variant, one row per
    (seed, variant) plus a "mean" row per variant

    Each variant gets its own grid search. An unlabelled dataset is split
    with ``split_seed`` first; the scaler is fitted on its development set.
    """
    if all(label is Split.UNASSIGNED for label in dataset.split_labels):
        dataset = assign_splits(dataset, split_seed)
    scaler = fit_scaler(dataset)
    dataset = dataset.with_scaler(scaler)
    well_ids = dataset.well_ids
    train_data = task_data(dataset, dataset.indices_with([Split.TRAIN]), scaler)
    val_data = task_data(dataset, dataset.indices_with([Split.VALIDATION]), scaler)
    development = task_data(dataset, dataset.development_indices(), scaler)

    rows = []
    for seed in seeds:
        for variant in variants:
            variant = Variant(variant)
            family = Family("mtl-universal", variant)
            trained, _ = select_and_fit(family, train_data, val_data, development, grid, seed, scaler,
                                        well_ids, n_jobs)
            wells = well_metrics(collect_predictions({variant.value: trained.model}, dataset))
            rows.append({"seed": str(seed), "variant": variant.value,
                         "mean_trimmed_mape": float(wells["mape"].mean()), "n_wells": len(wells)})
            logger.info("ablation seed %s %s: %.3f", seed, variant.value, rows[-1]["mean_trimmed_mape"])
    table = pd.DataFrame(rows, columns=["seed", "variant", "mean_trimmed_mape", "n_wells"])
    if table.empty:
        return table
    means = table.groupby("variant", sort=False, as_index=False).agg(
        mean_trimmed_mape=("mean_trimmed_mape", "mean"), n_wells=("n_wells", "max"))
    means.insert(0, "seed", "mean")
    return pd.concat([table, means], ignore_index=True)
