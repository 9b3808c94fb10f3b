"""
VFM Models
Per-well choke feature adjustment, the shared pre-activation residual
network, multi-task and single-task compositions, ablation variants,
tree-model wrapper and the JSON checkpoint container
"""

import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from data.well_data import Scaler
from tools.autodiff import ShapeMismatch, Value, add, as_value, concat, matmul, maximum, mul, relu
from tools.gbt import GbtModel

logger = logging.getLogger(__name__)

BREAKPOINTS = (0.2, 0.4, 0.6, 0.8)
N_FEATURES = 6
CHECKPOINT_VERSION = 1


class ModelError(Exception):
    """Base error for model construction, prediction and checkpoints"""


class UnknownWell(ModelError, KeyError):
    pass


class MissingScaler(ModelError, ValueError):
    pass


class CheckpointError(ModelError, ValueError):
    pass


class Variant(str, Enum):
    FULL = "full"
    NO_BETA = "no-beta"
    NO_GAMMA = "no-gamma"
    NO_BETA_NO_GAMMA = "no-beta-no-gamma"


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a network model

    ``kind`` is one of stl-ann, mtl-asset, mtl-universal. STL-ANN is the
    same network family with pinned feature adjustment and no task parameters.
    """
    kind: str
    m_l: int = 4
    m_h: int = 16
    m_beta: int = 2
    train_gamma: bool = True
    variant: Variant = Variant.FULL
    breakpoints: Tuple[float, ...] = BREAKPOINTS

    def __post_init__(self):
        if self.m_l < 4 or self.m_l % 2:
            raise ModelError(f"m_l must be even and at least 4, got {self.m_l}")
        if self.m_h < 1 or self.m_beta < 0:
            raise ModelError(f"invalid widths m_h={self.m_h}, m_beta={self.m_beta}")
        bp = self.breakpoints
        if any(not 0 < b < 1 for b in bp) or any(a >= b for a, b in zip(bp, bp[1:])):
            raise ModelError(f"breakpoints must be strictly increasing in (0, 1), got {bp}")

    @property
    def m_g(self) -> int:
        return len(self.breakpoints)

    @property
    def input_dim(self) -> int:
        return N_FEATURES + self.m_beta

    def layer_shapes(self) -> List[Tuple[int, int]]:
        return [(self.input_dim, self.m_h)] + [(self.m_h, self.m_h)] * (self.m_l - 2) + [(self.m_h, 1)]


def build_ablation(variant: Union[Variant, str], m_l: int = 4, m_h: int = 16, m_beta: int = 2,
                   kind: str = "mtl-universal") -> ModelSpec:
    """Spec for one ablation of the multi-task model"""
    variant = Variant(variant)
    keep_beta = variant in (Variant.FULL, Variant.NO_GAMMA)
    keep_gamma = variant in (Variant.FULL, Variant.NO_BETA)
    return ModelSpec(
        kind=kind,
        m_l=m_l,
        m_h=m_h,
        m_beta=m_beta if keep_beta else 0,
        train_gamma=keep_gamma,
        variant=variant,
    )


def stl_ann_spec(m_l: int = 4, m_h: int = 16) -> ModelSpec:
    return ModelSpec(kind="stl-ann", m_l=m_l, m_h=m_h, m_beta=0, train_gamma=False,
                     variant=Variant.NO_BETA_NO_GAMMA)


# --- forward pass (works on arrays or graph values) --------------------------------

def adjust_features(X, gamma_rows, breakpoints: Sequence[float] = BREAKPOINTS) -> Value:
    """
    Piecewise-linear choke remapping, one gamma row per sample

    psi = (1 + g0) * (u + sum_k g_k * max(0, u - u*_k)); returns
    [psi, p1, p2, T, phi_g, phi_o]. Identity on u when gamma is zero.
    """
    X, gamma_rows = as_value(X), as_value(gamma_rows)
    if X.data.ndim != 2 or X.shape[1] != N_FEATURES:
        raise ShapeMismatch(f"expected (N, {N_FEATURES}) features, got {X.shape}")
    if gamma_rows.shape != (X.shape[0], len(breakpoints) + 1):
        raise ShapeMismatch(f"gamma rows {gamma_rows.shape} do not match {X.shape[0]} samples")
    u = X[:, 0:1]
    bent = u
    for k, knot in enumerate(breakpoints, start=1):
        bent = add(bent, mul(gamma_rows[:, k:k + 1], maximum(add(u, -knot), 0.0)))
    psi = mul(add(gamma_rows[:, 0:1], 1.0), bent)
    return concat([psi, X[:, 1:]], axis=1)


def shared_forward(z, beta_rows, weights: Sequence, biases: Sequence) -> Value:
    """
    Residual network on [z, beta]; returns one scaled rate per row

    Input layer, then blocks h <- h + W2 relu(W1 relu(h) + b1) + b2,
    then a linear output layer.
    """
    z = as_value(z)
    beta_rows = as_value(beta_rows)
    if beta_rows.data.ndim != 2 or beta_rows.shape[0] != z.shape[0]:
        raise ShapeMismatch(f"beta rows {beta_rows.shape} do not match inputs {z.shape}")
    z1 = concat([z, beta_rows], axis=1) if beta_rows.shape[1] else z
    if z1.shape[1] != as_value(weights[0]).shape[0]:
        raise ShapeMismatch(f"input width {z1.shape[1]} does not match first layer {as_value(weights[0]).shape}")
    h = add(matmul(z1, weights[0]), biases[0])
    for k in range(1, len(weights) - 1, 2):
        inner = add(matmul(relu(h), weights[k]), biases[k])
        h = add(h, add(matmul(relu(inner), weights[k + 1]), biases[k + 1]))
    out = add(matmul(h, weights[-1]), biases[-1])
    return out[:, 0]


def one_hot(rows: np.ndarray, n_wells: int) -> np.ndarray:
    encoded = np.zeros((len(rows), n_wells))
    encoded[np.arange(len(rows)), rows] = 1.0
    return encoded


# --- model containers ----------------------------------------------------------------

class ParamCount(NamedTuple):
    shared: int
    per_well: int
    n_wells: int

    @property
    def total(self) -> int:
        return self.shared + self.per_well * self.n_wells


@dataclass
class NetworkModel:
    """Parameters of a network model and the wells it serves"""
    spec: ModelSpec
    well_ids: List[str]
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    gamma: np.ndarray
    beta: np.ndarray
    scaler: Optional[Scaler] = None
    meta: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def initialize(cls, spec: ModelSpec, well_ids: Sequence[str], rng: np.random.Generator,
                   scaler: Optional[Scaler] = None) -> "NetworkModel":
        """Uniform +-sqrt(6 / fan_in) weights, zero biases, zero gamma and beta"""
        if not well_ids:
            raise ModelError("a model needs at least one well")
        if len(set(well_ids)) != len(well_ids):
            raise ModelError(f"duplicate well ids: {list(well_ids)}")
        weights, biases = [], []
        for fan_in, fan_out in spec.layer_shapes():
            bound = np.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(
            spec=spec,
            well_ids=list(well_ids),
            weights=weights,
            biases=biases,
            gamma=np.zeros((len(well_ids), spec.m_g + 1)),
            beta=np.zeros((len(well_ids), spec.m_beta)),
            scaler=scaler,
        )

    @property
    def kind(self) -> str:
        return self.spec.kind

    def well_rows(self, well_ids: Sequence[str]) -> np.ndarray:
        index = {w: i for i, w in enumerate(self.well_ids)}
        missing = sorted({w for w in well_ids if w not in index})
        if missing:
            raise UnknownWell(f"{self.kind} model has no parameters for wells {missing}")
        return np.array([index[w] for w in well_ids], dtype=int)

    def parameters(self) -> Dict[str, np.ndarray]:
        """Trainable arrays by name; gamma only when trainable, beta only when m_beta > 0"""
        params: Dict[str, np.ndarray] = {}
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            params[f"W{k}"] = W
            params[f"b{k}"] = b
        if self.spec.train_gamma:
            params["gamma"] = self.gamma
        if self.spec.m_beta:
            params["beta"] = self.beta
        return params

    def forward(self, X_scaled, rows: np.ndarray, values: Optional[Mapping[str, Value]] = None) -> Value:
        """Graph for scaled predictions; ``values`` substitutes trainable leaves by name"""
        values = values or {}
        selector = one_hot(rows, len(self.well_ids))
        gamma = values.get("gamma", self.gamma)
        beta = values.get("beta", self.beta)
        weights = [values.get(f"W{k}", W) for k, W in enumerate(self.weights)]
        biases = [values.get(f"b{k}", b) for k, b in enumerate(self.biases)]
        z = adjust_features(X_scaled, matmul(selector, gamma), self.spec.breakpoints)
        beta_rows = matmul(selector, beta) if self.spec.m_beta else np.zeros((len(rows), 0))
        return shared_forward(z, beta_rows, weights, biases)

    def predict_scaled(self, X_scaled, well_ids: Sequence[str]) -> np.ndarray:
        X_scaled = np.atleast_2d(np.asarray(X_scaled, dtype=float))
        return self.forward(X_scaled, self.well_rows(well_ids)).data.copy()

    def predict(self, X, well_ids: Sequence[str]) -> np.ndarray:
        """Total rate in physical units for physical feature rows"""
        if self.scaler is None:
            raise MissingScaler(f"{self.kind} model has no scaler attached")
        X_scaled = self.scaler.transform_features(np.atleast_2d(np.asarray(X, dtype=float)))
        return self.scaler.invert("Q", self.predict_scaled(X_scaled, well_ids))

    def task_parameters(self) -> Dict[str, Dict[str, List[float]]]:
        return {
            w: {"gamma": self.gamma[i].tolist(), "beta": self.beta[i].tolist()}
            for i, w in enumerate(self.well_ids)
        }

    def copy(self) -> "NetworkModel":
        return replace(
            self,
            weights=[W.copy() for W in self.weights],
            biases=[b.copy() for b in self.biases],
            gamma=self.gamma.copy(),
            beta=self.beta.copy(),
            meta=dict(self.meta),
        )


def mtl_predict(model: NetworkModel, X_scaled, well_ids: Sequence[str]) -> np.ndarray:
    """f(x; gamma_j, beta_j, alpha) in scaled units"""
    return model.predict_scaled(X_scaled, well_ids)


def stl_ann_predict(model: NetworkModel, X_scaled) -> np.ndarray:
    """Single-task network on raw features, scaled units"""
    if len(model.well_ids) != 1 or model.spec.m_beta or model.spec.train_gamma:
        raise ModelError("stl_ann_predict needs a one-well model without task parameters")
    X_scaled = np.atleast_2d(np.asarray(X_scaled, dtype=float))
    return model.predict_scaled(X_scaled, model.well_ids * len(X_scaled))


def param_count(model: Union[NetworkModel, ModelSpec], n_wells: Optional[int] = None) -> ParamCount:
    """Trainable scalars: shared network plus per-well gamma and beta"""
    spec = model.spec if isinstance(model, NetworkModel) else model
    if n_wells is None:
        n_wells = len(model.well_ids) if isinstance(model, NetworkModel) else 1
    shared = sum(fan_in * fan_out + fan_out for fan_in, fan_out in spec.layer_shapes())
    per_well = (spec.m_g + 1 if spec.train_gamma else 0) + spec.m_beta
    return ParamCount(shared=shared, per_well=per_well, n_wells=n_wells)


@dataclass
class TreeModel:
    """Boosted trees for one well, fitted on scaled features and rate"""
    well_id: str
    booster: GbtModel
    scaler: Optional[Scaler] = None
    meta: Dict[str, Any] = field(default_factory=dict)
    kind: str = "stl-gbt"

    @property
    def well_ids(self) -> List[str]:
        return [self.well_id]

    def predict(self, X, well_ids: Sequence[str]) -> np.ndarray:
        if self.scaler is None:
            raise MissingScaler("tree model has no scaler attached")
        strangers = sorted(set(well_ids) - {self.well_id})
        if strangers:
            raise UnknownWell(f"tree model for {self.well_id} asked about {strangers}")
        X_scaled = self.scaler.transform_features(np.atleast_2d(np.asarray(X, dtype=float)))
        return self.scaler.invert("Q", self.booster.predict(X_scaled))


AnyModel = Union[NetworkModel, TreeModel]


def predict_phase_rates(model, X, well_ids: Sequence[str], phi=None) -> np.ndarray:
    """(N x 3) gas, oil, water rates from the predicted total and the composition"""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if phi is None:
        phi = np.column_stack([X[:, 4], X[:, 5], 1.0 - X[:, 4] - X[:, 5]])
    return model.predict(X, well_ids)[:, None] * np.asarray(phi, dtype=float)


# --- checkpoints -----------------------------------------------------------------------

def _spec_to_dict(spec: ModelSpec) -> Dict[str, Any]:
    return {
        "kind": spec.kind,
        "m_l": spec.m_l,
        "m_h": spec.m_h,
        "m_beta": spec.m_beta,
        "train_gamma": spec.train_gamma,
        "variant": spec.variant.value,
        "breakpoints": list(spec.breakpoints),
    }


def checkpoint_payload(model: AnyModel) -> Dict[str, Any]:
    payload: Dict[str, Any] = {
        "format_version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "scaler": model.scaler.to_dict() if model.scaler is not None else None,
        "meta": model.meta,
    }
    if isinstance(model, TreeModel):
        payload["model_type"] = "gbt"
        payload["well_id"] = model.well_id
        payload["gbt"] = model.booster.to_dict()
        return payload
    payload["model_type"] = "network"
    payload["spec"] = _spec_to_dict(model.spec)
    payload["breakpoints"] = list(model.spec.breakpoints)
    payload["well_ids"] = list(model.well_ids)
    payload["weights"] = [W.tolist() for W in model.weights]
    payload["biases"] = [b.tolist() for b in model.biases]
    payload["wells"] = model.task_parameters()
    return payload


def model_from_payload(payload: Mapping[str, Any]) -> AnyModel:
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {version!r}")
    scaler = Scaler.from_dict(payload["scaler"]) if payload.get("scaler") else None
    meta = dict(payload.get("meta") or {})
    if payload.get("model_type") == "gbt":
        return TreeModel(
            well_id=payload["well_id"],
            booster=GbtModel.from_dict(payload["gbt"]),
            scaler=scaler,
            meta=meta,
            kind=payload["kind"],
        )
    raw = dict(payload["spec"])
    raw["variant"] = Variant(raw["variant"])
    raw["breakpoints"] = tuple(raw["breakpoints"])
    spec = ModelSpec(**raw)
    well_ids = list(payload["well_ids"])
    wells = payload["wells"]
    gamma = np.array([wells[w]["gamma"] for w in well_ids], dtype=float).reshape(len(well_ids), spec.m_g + 1)
    beta = np.array([wells[w]["beta"] for w in well_ids], dtype=float).reshape(len(well_ids), spec.m_beta)
    weights = [np.array(W, dtype=float).reshape(shape) for W, shape in zip(payload["weights"], spec.layer_shapes())]
    biases = [np.array(b, dtype=float) for b in payload["biases"]]
    return NetworkModel(spec=spec, well_ids=well_ids, weights=weights, biases=biases,
                        gamma=gamma, beta=beta, scaler=scaler, meta=meta)


def save_checkpoint(model: AnyModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(checkpoint_payload(model), indent=1), encoding="utf-8")
    tmp.replace(path)
    logger.debug("Saved %s checkpoint to %s", model.kind, path)
    return path


def load_checkpoint(path) -> AnyModel:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return model_from_payload(payload)
