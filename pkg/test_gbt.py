"""
Tests for the exact greedy boosted-tree baseline
"""

import numpy as np
import pytest

from tools.gbt import (
    EmptyData,
    GbtConfig,
    GbtModel,
    TreeRegularization,
    best_split,
    boost,
    build_tree,
    gbt_predict,
    leaf_weight,
    split_gain,
)


def brute_force_split(X, g, h, reg):
    """Every (feature, midpoint) pair scored directly; first strict maximum wins"""
    best, best_gain = None, 0.0
    for feature in range(X.shape[1]):
        values = np.unique(X[:, feature])
        for lo, hi in zip(values[:-1], values[1:]):
            threshold = 0.5 * (lo + hi)
            left = X[:, feature] < threshold
            gain = split_gain(g[left].sum(), h[left].sum(), g[~left].sum(), h[~left].sum(), reg)
            if gain > best_gain + 1e-12:
                best, best_gain = (feature, threshold, gain), gain
    return best


def test_hand_computed_boosting_example():
    """Depth-1 stumps, unit learning rate and no shrinkage"""
    X = np.array([[1.0], [2.0], [3.0], [4.0]])
    y = np.array([1.0, 2.0, 3.0, 10.0])
    model = boost(X, y, config=GbtConfig(n_rounds=2, learning_rate=1.0, max_depth=1, reg_lambda=0.0))
    np.testing.assert_allclose(model.predict(X), [1.0, 7 / 3, 7 / 3, 31 / 3])
    assert model.trees[0].root.threshold == pytest.approx(3.5)
    assert model.trees[1].root.threshold == pytest.approx(1.5)


def test_leaf_weight_and_gain():
    assert leaf_weight(4.0, 3.0, 1.0) == pytest.approx(-1.0)
    reg = TreeRegularization(reg_lambda=0.0, reg_gamma=0.5)
    assert split_gain(3.0, 1.0, -3.0, 3.0, reg) == pytest.approx(0.5 * (9 + 3) - 0.5)


@pytest.mark.parametrize("trial", range(200))
def test_greedy_split_matches_exhaustive_search(trial):
    rng = np.random.default_rng(trial)
    n, d = rng.integers(2, 9), rng.integers(1, 4)
    X = np.round(rng.normal(size=(n, d)), 1)
    g = rng.normal(size=n)
    h = rng.uniform(0.5, 2.0, size=n)
    reg = TreeRegularization(reg_lambda=float(rng.choice([0.0, 0.1, 1.0])), reg_gamma=float(rng.choice([0.0, 0.01])))
    found, expected = best_split(X, g, h, reg), brute_force_split(X, g, h, reg)
    if expected is None:
        assert found is None or found[2] <= 1e-12
        return
    assert found is not None
    assert found[2] == pytest.approx(expected[2], rel=1e-9, abs=1e-12)
    feature, threshold, _ = found
    left = X[:, feature] < threshold
    direct = split_gain(g[left].sum(), h[left].sum(), g[~left].sum(), h[~left].sum(), reg)
    assert direct == pytest.approx(expected[2], rel=1e-9, abs=1e-12)


def test_tree_respects_depth_and_threshold_rule():
    rng = np.random.default_rng(0)
    X = rng.uniform(size=(60, 3))
    y = np.sin(6 * X[:, 0]) + X[:, 1]
    for depth in (0, 1, 2, 3):
        tree = build_tree(X, -y, np.ones(60), reg=TreeRegularization(max_depth=depth, reg_lambda=1.0))
        assert tree.depth <= depth
        assert tree.n_leaves <= 2 ** depth
    stump = build_tree(X, -y, np.ones(60), reg=TreeRegularization(max_depth=1))
    node = stump.root
    at_threshold = X[:1].copy()
    at_threshold[0, node.feature] = node.threshold
    assert stump.predict(at_threshold)[0] == node.right.weight


def test_gamma_penalty_prevents_splits():
    X = np.array([[0.0], [1.0]])
    tree = build_tree(X, np.array([0.1, -0.1]), np.ones(2), reg=TreeRegularization(reg_lambda=1.0, reg_gamma=10.0))
    assert tree.n_leaves == 1


@pytest.mark.parametrize("seed", range(5))
def test_training_loss_never_increases(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(80, 3))
    y = X[:, 0] ** 2 + rng.normal(scale=0.1, size=80)
    w = rng.choice([1.0, 0.1], size=80)
    model = boost(X, y, w, GbtConfig(n_rounds=40, learning_rate=0.3, max_depth=3, reg_lambda=1.0))
    assert np.all(np.diff(model.train_loss) <= 1e-12)
    assert len(model.trees) == 40 == model.best_iteration


def tree_shape(node):
    if node.is_leaf:
        return ("leaf",)
    return (node.feature, tree_shape(node.left), tree_shape(node.right))


def test_monotone_feature_transform_keeps_predictions():
    """Splits only depend on the order of feature values"""
    rng = np.random.default_rng(3)
    X = rng.uniform(0.1, 2.0, size=(60, 3))
    y = np.sin(3 * X[:, 0]) + X[:, 1] * X[:, 2]
    config = GbtConfig(n_rounds=20, learning_rate=0.3, max_depth=3, reg_lambda=1.0, reg_gamma=1e-3)
    model = boost(X, y, config=config)
    stretched = X.copy()
    stretched[:, 1] = np.exp(3 * X[:, 1])
    stretched[:, 2] = X[:, 2] ** 3 + X[:, 2]
    other = boost(stretched, y, config=config)
    assert [tree_shape(t.root) for t in other.trees] == [tree_shape(t.root) for t in model.trees]
    np.testing.assert_allclose(other.predict(stretched), model.predict(X), rtol=1e-12)


def test_duplicated_dataset_matches_doubled_weights():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(50, 3))
    y = X[:, 0] - 0.5 * X[:, 1] ** 2 + rng.normal(scale=0.1, size=50)
    w = rng.choice([1.0, 0.1], size=50)
    config = GbtConfig(n_rounds=15, learning_rate=0.3, max_depth=3, reg_lambda=1.0)
    doubled = boost(X, y, 2 * w, config)
    duplicated = boost(np.vstack([X, X]), np.concatenate([y, y]), np.concatenate([w, w]), config)
    assert [tree_shape(t.root) for t in duplicated.trees] == [tree_shape(t.root) for t in doubled.trees]
    np.testing.assert_allclose(duplicated.predict(X), doubled.predict(X), rtol=1e-9)
    np.testing.assert_allclose(duplicated.train_loss, doubled.train_loss, rtol=1e-9)


def test_duplicated_dataset_without_penalties_is_unchanged():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(40, 2))
    y = np.abs(X[:, 0]) + X[:, 1]
    config = GbtConfig(n_rounds=10, learning_rate=0.5, max_depth=2, reg_lambda=0.0, reg_gamma=0.0)
    once = boost(X, y, config=config)
    twice = boost(np.vstack([X, X]), np.concatenate([y, y]), config=config)
    np.testing.assert_allclose(twice.predict(X), once.predict(X), rtol=1e-9)


def test_early_stopping_keeps_best_round():
    rng = np.random.default_rng(1)
    X = rng.uniform(size=(100, 2))
    y = X[:, 0] + rng.normal(scale=0.5, size=100)
    X_val = rng.uniform(size=(50, 2))
    y_val = X_val[:, 0] + rng.normal(scale=0.5, size=50)
    model = boost(X, y, config=GbtConfig(n_rounds=300, learning_rate=0.5, max_depth=4, patience=10),
                  X_val=X_val, y_val=y_val)
    assert len(model.trees) == model.best_iteration
    assert model.best_iteration < 300
    assert model.val_loss[model.best_iteration] == min(model.val_loss)
    assert len(model.val_loss) == len(model.train_loss) == min(model.best_iteration + 10, 300) + 1


def test_model_serialization_preserves_predictions():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(40, 3))
    y = X @ np.array([1.0, -2.0, 0.5])
    model = boost(X, y, config=GbtConfig(n_rounds=15, max_depth=2))
    restored = GbtModel.from_dict(model.to_dict())
    np.testing.assert_array_equal(gbt_predict(restored, X), model.predict(X))
    assert restored.n_leaves == model.n_leaves


def test_weighted_base_score():
    model = boost(np.zeros((3, 1)), np.array([1.0, 2.0, 4.0]), np.array([1.0, 1.0, 2.0]),
                  GbtConfig(n_rounds=0))
    assert model.base_score == pytest.approx(11.0 / 4.0)
    assert model.trees == []


def test_empty_data():
    with pytest.raises(EmptyData):
        boost(np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(EmptyData):
        build_tree(np.zeros((0, 2)), np.zeros(0), np.zeros(0))


def test_exhaustive_enumeration_helper_is_consistent():
    """Sanity check of the brute-force oracle on a case with one obvious split"""
    X = np.array([[0.0], [0.0], [1.0], [1.0]])
    g = np.array([1.0, 1.0, -1.0, -1.0])
    assert brute_force_split(X, g, np.ones(4), TreeRegularization(reg_lambda=0.0))[:2] == (0, 0.5)
