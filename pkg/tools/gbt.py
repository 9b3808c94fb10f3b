"""
Gradient Boosted Trees
Exact greedy regression trees with leaf-count and leaf-weight penalties,
boosted on a weighted squared-error objective
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)


class GbtError(Exception):
    """Base error for the tree baseline"""


class EmptyData(GbtError, ValueError):
    pass


@dataclass(frozen=True)
class TreeRegularization:
    reg_lambda: float = 1.0
    reg_gamma: float = 0.0
    max_depth: int = 3

    def __post_init__(self):
        if self.reg_lambda < 0 or self.reg_gamma < 0:
            raise GbtError(f"regularization must be non-negative: {self}")
        if self.max_depth < 0:
            raise GbtError(f"max_depth must be non-negative, got {self.max_depth}")


@dataclass
class TreeNode:
    """Split node when ``feature`` is set, leaf otherwise"""
    weight: float = 0.0
    feature: Optional[int] = None
    threshold: float = 0.0
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    def to_dict(self) -> Dict[str, Any]:
        if self.is_leaf:
            return {"leaf": self.weight}
        return {
            "feature": self.feature,
            "threshold": self.threshold,
            "left": self.left.to_dict(),
            "right": self.right.to_dict(),
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "TreeNode":
        if "leaf" in payload:
            return cls(weight=float(payload["leaf"]))
        return cls(
            feature=int(payload["feature"]),
            threshold=float(payload["threshold"]),
            left=cls.from_dict(payload["left"]),
            right=cls.from_dict(payload["right"]),
        )


@dataclass
class RegressionTree:
    root: TreeNode

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.empty(len(X))
        self._fill(self.root, X, np.arange(len(X)), out)
        return out

    def _fill(self, node: TreeNode, X: np.ndarray, rows: np.ndarray, out: np.ndarray):
        if node.is_leaf:
            out[rows] = node.weight
            return
        go_left = X[rows, node.feature] < node.threshold
        self._fill(node.left, X, rows[go_left], out)
        self._fill(node.right, X, rows[~go_left], out)

    @property
    def depth(self) -> int:
        def _depth(node):
            return 0 if node.is_leaf else 1 + max(_depth(node.left), _depth(node.right))
        return _depth(self.root)

    @property
    def n_leaves(self) -> int:
        def _count(node):
            return 1 if node.is_leaf else _count(node.left) + _count(node.right)
        return _count(self.root)


def leaf_weight(G: float, H: float, reg_lambda: float) -> float:
    return -G / (H + reg_lambda)


def _score(G, H, reg_lambda):
    return G * G / (H + reg_lambda)


def split_gain(GL: float, HL: float, GR: float, HR: float, reg: TreeRegularization) -> float:
    """Loss reduction of a split, net of the leaf penalty"""
    lam = reg.reg_lambda
    return 0.5 * (_score(GL, HL, lam) + _score(GR, HR, lam) - _score(GL + GR, HL + HR, lam)) - reg.reg_gamma


def best_split(X: np.ndarray, g: np.ndarray, h: np.ndarray, reg: TreeRegularization) -> Optional[Tuple[int, float, float]]:
    """
    Exact greedy search over midpoints of consecutive distinct values

    Returns (feature, threshold, gain) for the best positive-gain split,
    or None. Ties keep the first candidate in (feature, threshold) order.
    """
    G, H = g.sum(), h.sum()
    best = None
    best_gain = 0.0
    for feature in range(X.shape[1]):
        order = np.argsort(X[:, feature], kind="stable")
        values = X[order, feature]
        GL = np.cumsum(g[order])[:-1]
        HL = np.cumsum(h[order])[:-1]
        distinct = values[1:] > values[:-1]
        if not distinct.any():
            continue
        lam = reg.reg_lambda
        with np.errstate(divide="ignore", invalid="ignore"):
            gains = 0.5 * (GL ** 2 / (HL + lam) + (G - GL) ** 2 / (H - HL + lam) - G ** 2 / (H + lam)) - reg.reg_gamma
        gains = np.where(distinct & np.isfinite(gains), gains, -np.inf)
        k = int(np.argmax(gains))
        if gains[k] > best_gain:
            best_gain = float(gains[k])
            best = (feature, float(0.5 * (values[k] + values[k + 1])), best_gain)
    return best


def build_tree(X, g, h, weights=None, reg: TreeRegularization = TreeRegularization()) -> RegressionTree:
    """
    Grow one tree on gradients ``g`` and hessians ``h``

    Sample ``weights`` scale both g and h. Splits with gain <= 0 are
    rejected, so a node only splits when it lowers the regularized loss.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    g = np.asarray(g, dtype=float)
    h = np.asarray(h, dtype=float)
    if len(X) == 0:
        raise EmptyData("cannot build a tree on zero samples")
    if len(g) != len(X) or len(h) != len(X):
        raise GbtError(f"gradient/hessian length mismatch with {len(X)} samples")
    if np.any(h < 0):
        raise GbtError("hessians must be non-negative")
    if weights is not None:
        weights = np.asarray(weights, dtype=float)
        g = g * weights
        h = h * weights

    def grow(rows: np.ndarray, depth: int) -> TreeNode:
        G, H = g[rows].sum(), h[rows].sum()
        node = TreeNode(weight=leaf_weight(G, H, reg.reg_lambda) if H + reg.reg_lambda > 0 else 0.0)
        if depth >= reg.max_depth or len(rows) < 2:
            return node
        found = best_split(X[rows], g[rows], h[rows], reg)
        if found is None:
            return node
        feature, threshold, _ = found
        go_left = X[rows, feature] < threshold
        return TreeNode(
            feature=feature,
            threshold=threshold,
            left=grow(rows[go_left], depth + 1),
            right=grow(rows[~go_left], depth + 1),
        )

    return RegressionTree(root=grow(np.arange(len(X)), 0))


@dataclass(frozen=True)
class GbtConfig:
    n_rounds: int = 500
    learning_rate: float = 0.1
    max_depth: int = 3
    reg_lambda: float = 1.0
    reg_gamma: float = 0.0
    patience: int = 50

    @property
    def regularization(self) -> TreeRegularization:
        return TreeRegularization(self.reg_lambda, self.reg_gamma, self.max_depth)


@dataclass
class GbtModel:
    """
    Boosted trees plus their training history

    ``train_loss`` and ``val_loss`` hold one entry before the first tree and
    one per boosted round, including the rounds after ``best_iteration``
    whose trees early stopping discarded.
    """

    base_score: float
    learning_rate: float
    trees: List[RegressionTree] = field(default_factory=list)
    config: GbtConfig = field(default_factory=GbtConfig)
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    best_iteration: int = 0

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.full(len(X), self.base_score)
        for tree in self.trees:
            out += self.learning_rate * tree.predict(X)
        return out

    @property
    def n_leaves(self) -> int:
        return sum(tree.n_leaves for tree in self.trees)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "base_score": self.base_score,
            "learning_rate": self.learning_rate,
            "config": asdict(self.config),
            "best_iteration": self.best_iteration,
            "trees": [tree.root.to_dict() for tree in self.trees],
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "GbtModel":
        return cls(
            base_score=float(payload["base_score"]),
            learning_rate=float(payload["learning_rate"]),
            trees=[RegressionTree(TreeNode.from_dict(t)) for t in payload["trees"]],
            config=GbtConfig(**payload.get("config", {})),
            best_iteration=int(payload.get("best_iteration", len(payload["trees"]))),
        )


def _weighted_mse(pred, y, w) -> float:
    return float(np.sum(w * (pred - y) ** 2) / np.sum(w))


def boost(X, y, weights=None, config: GbtConfig = GbtConfig(), X_val=None, y_val=None, w_val=None) -> GbtModel:
    """
    Fit an additive tree model to weighted squared error

    With validation data, stops after ``config.patience`` rounds without a
    validation improvement and keeps the trees up to the best round. The
    loss traces are not truncated.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    if len(X) == 0 or len(y) == 0:
        raise EmptyData("cannot boost on zero samples")
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
    base = float(np.sum(w * y) / np.sum(w))
    model = GbtModel(base_score=base, learning_rate=config.learning_rate, config=config)
    reg = config.regularization

    pred = np.full(len(y), base)
    has_val = X_val is not None and len(X_val) > 0
    if has_val:
        X_val = np.atleast_2d(np.asarray(X_val, dtype=float))
        y_val = np.asarray(y_val, dtype=float)
        w_val = np.ones(len(y_val)) if w_val is None else np.asarray(w_val, dtype=float)
        val_pred = np.full(len(y_val), base)
        best_val = _weighted_mse(val_pred, y_val, w_val)
        model.val_loss.append(best_val)
    model.train_loss.append(_weighted_mse(pred, y, w))

    best_round, since_best = 0, 0
    for round_idx in range(1, config.n_rounds + 1):
        tree = build_tree(X, pred - y, np.ones(len(y)), w, reg)
        model.trees.append(tree)
        pred = pred + config.learning_rate * tree.predict(X)
        model.train_loss.append(_weighted_mse(pred, y, w))
        if not has_val:
            best_round = round_idx
            continue
        val_pred = val_pred + config.learning_rate * tree.predict(X_val)
        loss = _weighted_mse(val_pred, y_val, w_val)
        model.val_loss.append(loss)
        if loss < best_val:
            best_val, best_round, since_best = loss, round_idx, 0
        else:
            since_best += 1
            if since_best >= config.patience:
                logger.debug("early stop at round %d (best %d)", round_idx, best_round)
                break

    model.trees = model.trees[:best_round]
    model.best_iteration = best_round
    return model


def gbt_predict(model: GbtModel, X) -> np.ndarray:
    return model.predict(X)
