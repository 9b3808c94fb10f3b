"""
Training
Weighted regularized loss, the epoch loop with three shuffled batches,
hyperparameter grid search and final refits on the development set
"""

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from sklearn.model_selection import ParameterGrid

from data.well_data import AssetDataset, Scaler, feature_matrix, target_vector, weight_vector
from src.config import GridConfig, derive_seed
from src.vfm_models import (
    ModelSpec,
    NetworkModel,
    TreeModel,
    Variant,
    build_ablation,
    param_count,
    stl_ann_spec,
)
from tools.autodiff import OptimizerState, Value, adamw_step, add, backward, lr_schedule, mul, parameter, scale, square, sum_
from tools.gbt import GbtConfig, boost

logger = logging.getLogger(__name__)

TIE_TOLERANCE = 0.01
LOG_EVERY = 100


class TrainingError(Exception):
    """Base error for training and model selection"""


class EmptyBatch(TrainingError, ValueError):
    pass


class NonFiniteLoss(TrainingError, FloatingPointError):
    def __init__(self, message: str, trace: Sequence[float] = ()):
        self.trace = list(trace)
        super().__init__(message)


class AllConfigsFailed(TrainingError, RuntimeError):
    def __init__(self, failures: Sequence[Tuple[Dict[str, Any], str]]):
        self.failures = list(failures)
        detail = "; ".join(f"{cfg}: {err}" for cfg, err in self.failures[:5])
        super().__init__(f"all {len(self.failures)} configurations failed: {detail}")


@dataclass(frozen=True)
class HyperConfig:
    m_l: int = 4
    m_h: int = 16
    lam: float = 1e-4
    m_beta: int = 2
    lam_t: float = 1e-3
    epochs: int = 3000
    batches_per_epoch: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0 or self.lam_t < 0:
            raise TrainingError(f"regularization factors must be non-negative: {self}")
        if self.epochs < 500:
            raise TrainingError(f"epochs must be at least 500, got {self.epochs}")
        if self.batches_per_epoch < 1:
            raise TrainingError("need at least one batch per epoch")


@dataclass
class TaskData:
    """Scaled inputs and targets with sample weights and well labels"""
    X: np.ndarray
    y: np.ndarray
    w: np.ndarray
    well_ids: List[str]

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, rows: np.ndarray) -> "TaskData":
        return TaskData(self.X[rows], self.y[rows], self.w[rows], [self.well_ids[i] for i in rows])

    @classmethod
    def concat(cls, parts: Sequence["TaskData"]) -> "TaskData":
        parts = [p for p in parts if p is not None and len(p)]
        if not parts:
            return cls(np.zeros((0, 6)), np.zeros(0), np.zeros(0), [])
        return cls(
            np.vstack([p.X for p in parts]),
            np.concatenate([p.y for p in parts]),
            np.concatenate([p.w for p in parts]),
            [w for p in parts for w in p.well_ids],
        )


def task_data(dataset: AssetDataset, indices: Sequence[int], scaler: Scaler) -> TaskData:
    observations = [dataset.observations[i] for i in indices]
    return TaskData(
        X=scaler.transform_features(feature_matrix(observations)),
        y=np.asarray(scaler.apply("Q", target_vector(observations)), dtype=float),
        w=weight_vector(observations),
        well_ids=[o.well_id for o in observations],
    )


# --- loss ------------------------------------------------------------------------------

def regularization(model: NetworkModel, values: Dict[str, Value], lam: float, lam_t: float) -> Optional[Value]:
    """lam * |alpha without the first bias|^2 + lam_t * (|beta|^2 + |gamma|^2)"""
    terms = []
    for name, value in values.items():
        if name == "b0":
            continue
        factor = lam_t if name in ("gamma", "beta") else lam
        if factor:
            terms.append(scale(sum_(square(value)), factor))
    if not terms:
        return None
    total = terms[0]
    for term in terms[1:]:
        total = add(total, term)
    return total


def loss(model: NetworkModel, batch: TaskData, lam: float = 0.0, lam_t: float = 0.0,
         values: Optional[Dict[str, Value]] = None) -> Value:
    """Weighted mean squared error plus parameter penalties"""
    if len(batch) == 0:
        raise EmptyBatch("loss needs at least one sample")
    values = values if values is not None else {k: Value(v) for k, v in model.parameters().items()}
    pred = model.forward(batch.X, model.well_rows(batch.well_ids), values)
    weights = batch.w / batch.w.sum()
    data_term = sum_(mul(weights, square(add(pred, -batch.y))))
    penalty = regularization(model, values, lam, lam_t)
    return data_term if penalty is None else add(data_term, penalty)


def weighted_mse(pred: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    return float(np.sum(w * (pred - y) ** 2) / np.sum(w))


# --- training loop -----------------------------------------------------------------------

@dataclass
class TrainedModel:
    kind: str
    model: Union[NetworkModel, TreeModel]
    hyper: Union[HyperConfig, GbtConfig]
    train_trace: List[float] = field(default_factory=list)
    val_trace: List[float] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def scaler(self) -> Optional[Scaler]:
        return self.model.scaler

    def predict(self, X, well_ids: Sequence[str]) -> np.ndarray:
        return self.model.predict(X, well_ids)

    def predict_scaled(self, X_scaled, well_ids: Sequence[str]) -> np.ndarray:
        if isinstance(self.model, TreeModel):
            return self.model.booster.predict(X_scaled)
        return self.model.predict_scaled(X_scaled, well_ids)


def train(spec: ModelSpec, train_data: TaskData, val_data: Optional[TaskData], hyper: HyperConfig,
          scaler: Optional[Scaler] = None, well_ids: Optional[Sequence[str]] = None) -> TrainedModel:
    """
    Fit a network model from scratch

    Each epoch shuffles all training points (across wells), splits them into
    ``hyper.batches_per_epoch`` near-equal batches and takes one AdamW step
    per batch. The returned parameters are those of the final epoch.
    """
    if len(train_data) == 0:
        raise EmptyBatch("cannot train on an empty training set")
    started = time.perf_counter()
    well_ids = list(well_ids) if well_ids is not None else list(dict.fromkeys(train_data.well_ids))
    model = NetworkModel.initialize(spec, well_ids, np.random.default_rng(derive_seed(hyper.seed, "init")), scaler)
    values = {name: parameter(array) for name, array in model.parameters().items()}
    params = list(values.values())
    state = OptimizerState.create(params, lr=lr_schedule(0, hyper.epochs))
    train_rows = model.well_rows(train_data.well_ids)
    val_rows = model.well_rows(val_data.well_ids) if val_data is not None and len(val_data) else None

    train_trace, val_trace = [], []
    n = len(train_data)
    for epoch in range(hyper.epochs):
        state.lr = lr_schedule(epoch, hyper.epochs)
        order = np.random.default_rng(derive_seed(hyper.seed, "epoch", epoch)).permutation(n)
        for batch_rows in np.array_split(order, min(hyper.batches_per_epoch, n)):
            batch = train_data.subset(batch_rows)
            value = loss(model, batch, hyper.lam, hyper.lam_t, values)
            if not np.isfinite(value.data):
                raise NonFiniteLoss(f"{spec.kind}: non-finite loss at epoch {epoch}", train_trace)
            backward(value, params)
            adamw_step(state, params)

        pred = model.forward(train_data.X, train_rows).data
        train_trace.append(weighted_mse(pred, train_data.y, train_data.w))
        if not np.isfinite(train_trace[-1]):
            raise NonFiniteLoss(f"{spec.kind}: non-finite training loss after epoch {epoch}", train_trace)
        if val_rows is not None:
            val_pred = model.forward(val_data.X, val_rows).data
            val_trace.append(weighted_mse(val_pred, val_data.y, val_data.w))
        if epoch % LOG_EVERY == 0:
            logger.debug("%s epoch %d lr %.2e train %.4g", spec.kind, epoch, state.lr, train_trace[-1])

    wall = time.perf_counter() - started
    model.meta.update({"hyper": asdict(hyper), "wall_time": wall})
    logger.info("Trained %s on %d wells in %.1fs (train %.4g%s)", spec.kind, len(well_ids), wall, train_trace[-1],
                f", val {val_trace[-1]:.4g}" if val_trace else "")
    return TrainedModel(kind=spec.kind, model=model, hyper=hyper, train_trace=train_trace,
                        val_trace=val_trace, wall_time=wall)


def train_gbt(well_id: str, train_data: TaskData, val_data: Optional[TaskData], config: GbtConfig,
              scaler: Optional[Scaler] = None) -> TrainedModel:
    started = time.perf_counter()
    has_val = val_data is not None and len(val_data) > 0
    booster = boost(
        train_data.X, train_data.y, train_data.w, config,
        val_data.X if has_val else None, val_data.y if has_val else None, val_data.w if has_val else None,
    )
    wall = time.perf_counter() - started
    model = TreeModel(well_id=well_id, booster=booster, scaler=scaler,
                      meta={"hyper": asdict(config), "wall_time": wall, "n_leaves": booster.n_leaves})
    return TrainedModel(kind="stl-gbt", model=model, hyper=config, train_trace=list(booster.train_loss),
                        val_trace=list(booster.val_loss), wall_time=wall)


# --- grid search -----------------------------------------------------------------------------

@dataclass(frozen=True)
class Family:
    """What to grid-search: a network kind with its ablation variant, or trees"""
    kind: str
    variant: Variant = Variant.FULL

    @property
    def is_tree(self) -> bool:
        return self.kind == "stl-gbt"

    def spec(self, hyper: HyperConfig) -> ModelSpec:
        if self.kind == "stl-ann":
            return stl_ann_spec(hyper.m_l, hyper.m_h)
        return build_ablation(self.variant, hyper.m_l, hyper.m_h, hyper.m_beta, kind=self.kind)


def candidate_configs(family: Family, grid: GridConfig, seed: int) -> List[Dict[str, Any]]:
    if family.is_tree:
        return list(ParameterGrid({
            "max_depth": grid.gbt_max_depth,
            "reg_lambda": grid.gbt_reg_lambda,
            "reg_gamma": grid.gbt_reg_gamma,
            "learning_rate": grid.gbt_learning_rate,
        }))
    space: Dict[str, List[Any]] = {"m_l": grid.m_l, "lam": grid.lam}
    if family.kind == "stl-ann":
        space["m_h"] = grid.stl_m_h
    else:
        space["m_h"] = grid.mtl_m_h
        space["lam_t"] = grid.lam_t
        if family.variant in (Variant.FULL, Variant.NO_GAMMA):
            space["m_beta"] = grid.m_beta
    configs = []
    for params in ParameterGrid(space):
        params.setdefault("m_beta", 0 if family.kind == "stl-ann" or family.variant in (Variant.NO_BETA, Variant.NO_BETA_NO_GAMMA) else 2)
        params.setdefault("lam_t", 0.0)
        configs.append(params)
    return configs


def _as_hyper(params: Dict[str, Any], epochs: int, batches: int, seed: int) -> HyperConfig:
    return HyperConfig(m_l=params["m_l"], m_h=params["m_h"], lam=params["lam"], m_beta=params["m_beta"],
                       lam_t=params["lam_t"], epochs=epochs, batches_per_epoch=batches, seed=seed)


def _as_gbt(params: Dict[str, Any], grid: GridConfig, n_rounds: Optional[int] = None) -> GbtConfig:
    return GbtConfig(
        n_rounds=grid.gbt_rounds if n_rounds is None else n_rounds,
        learning_rate=params["learning_rate"],
        max_depth=params["max_depth"],
        reg_lambda=params["reg_lambda"],
        reg_gamma=params["reg_gamma"],
        patience=grid.gbt_patience,
    )


def restrict_to_data(family: Family, configs: List[Dict[str, Any]], n_points: int, n_wells: int) -> List[Dict[str, Any]]:
    """Drop network configs with more trainable scalars than training points (keeps the smallest)"""
    if family.is_tree or not configs:
        return configs

    def size(params):
        hyper = _as_hyper(params, 500, 1, 0)
        return param_count(family.spec(hyper), n_wells).total

    kept = [c for c in configs if size(c) <= n_points]
    return kept or [min(configs, key=size)]


@dataclass
class SearchResult:
    params: Dict[str, Any]
    val_loss: float = float("inf")
    complexity: int = 0
    error: Optional[str] = None

    @property
    def success(self) -> bool:
        return self.error is None


def _evaluate_config(family: Family, params: Dict[str, Any], train_data: TaskData, val_data: TaskData,
                     grid: GridConfig, seed: int, well_ids: Sequence[str]) -> SearchResult:
    try:
        if family.is_tree:
            trained = train_gbt(well_ids[0], train_data, val_data, _as_gbt(params, grid))
            booster = trained.model.booster
            val_loss = min(booster.val_loss) if booster.val_loss else booster.train_loss[-1]
            return SearchResult(dict(params, n_rounds=booster.best_iteration), val_loss, booster.n_leaves)
        hyper = _as_hyper(params, grid.epochs_search, grid.batches_per_epoch, seed)
        trained = train(family.spec(hyper), train_data, val_data, hyper, well_ids=well_ids)
        val_loss = trained.val_trace[-1] if trained.val_trace else trained.train_trace[-1]
        if not np.isfinite(val_loss):
            raise NonFiniteLoss("validation loss is not finite")
        return SearchResult(params, val_loss, param_count(trained.model).total)
    except Exception as e:
        logger.warning("%s config %s failed: %s", family.kind, params, e)
        return SearchResult(params, error=f"{type(e).__name__}: {e}")


def select_best(results: Sequence[SearchResult], tolerance: float = TIE_TOLERANCE) -> SearchResult:
    """Lowest validation loss; within ``tolerance`` relative, the smaller model wins"""
    succeeded = [r for r in results if r.success]
    if not succeeded:
        raise AllConfigsFailed([(r.params, r.error) for r in results])
    best_loss = min(r.val_loss for r in succeeded)
    close = [r for r in succeeded if r.val_loss <= best_loss * (1.0 + tolerance)]
    return min(close, key=lambda r: (r.complexity, r.val_loss))


def grid_search(family: Family, train_data: TaskData, val_data: TaskData, grid: GridConfig, seed: int,
                well_ids: Optional[Sequence[str]] = None, n_jobs: int = 1) -> Tuple[Dict[str, Any], List[SearchResult]]:
    """
    Train every candidate on the training set and score it on validation

    Returns the chosen parameter dict and the full result list. Configs are
    evaluated in parallel with results kept in grid order.
    """
    well_ids = list(well_ids) if well_ids is not None else list(dict.fromkeys(train_data.well_ids))
    configs = candidate_configs(family, grid, seed)
    if grid.restrict_to_data:
        configs = restrict_to_data(family, configs, len(train_data), len(well_ids))
    if not configs:
        raise AllConfigsFailed([])
    if len(configs) == 1:
        results = [SearchResult(configs[0])]
        logger.info("%s: single candidate %s", family.kind, configs[0])
        return configs[0], results
    search_seed = derive_seed(seed, "search")
    results = Parallel(n_jobs=n_jobs)(
        delayed(_evaluate_config)(family, params, train_data, val_data, grid, search_seed, well_ids)
        for params in configs
    )
    best = select_best(results)
    logger.info("%s: chose %s (val %.4g) from %d candidates", family.kind, best.params, best.val_loss, len(results))
    return best.params, results


def fit_final(family: Family, params: Dict[str, Any], development: TaskData, grid: GridConfig, seed: int,
              scaler: Scaler, well_ids: Optional[Sequence[str]] = None,
              val_data: Optional[TaskData] = None) -> TrainedModel:
    """
    Refit the chosen configuration from scratch on the development set

    Networks train for search + final epochs; trees use the round count
    found by early stopping (the full budget when unknown).
    """
    well_ids = list(well_ids) if well_ids is not None else list(dict.fromkeys(development.well_ids))
    if family.is_tree:
        rounds = params.get("n_rounds")
        if rounds is None:
            search_fit = train_gbt(well_ids[0], development, val_data, _as_gbt(params, grid))
            rounds = search_fit.model.booster.best_iteration
        trained = train_gbt(well_ids[0], development, None, _as_gbt(params, grid, n_rounds=rounds), scaler)
        trained.model.meta["params"] = dict(params)
        return trained
    hyper = _as_hyper(params, grid.epochs_search + grid.epochs_final, grid.batches_per_epoch, derive_seed(seed, "final"))
    trained = train(family.spec(hyper), development, val_data, hyper, scaler=scaler, well_ids=well_ids)
    trained.model.meta.update({"params": dict(params), "variant": family.variant.value})
    return trained


def select_and_fit(family: Family, train_data: TaskData, val_data: TaskData, development: TaskData,
                   grid: GridConfig, seed: int, scaler: Scaler, well_ids: Sequence[str],
                   n_jobs: int = 1) -> Tuple[TrainedModel, List[SearchResult]]:
    """Grid search on train/validation, then the final refit on development"""
    params, results = grid_search(family, train_data, val_data, grid, seed, well_ids, n_jobs)
    trained = fit_final(family, params, development, grid, seed, scaler, well_ids, val_data)
    trained.model.meta["search"] = [
        {"params": r.params, "val_loss": r.val_loss, "complexity": r.complexity, "error": r.error}
        for r in results
    ]
    return trained, results
