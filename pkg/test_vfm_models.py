"""
Tests for the network architecture, parameter accounting and checkpoints
"""

import numpy as np
import pytest

from data.well_data import Scaler
from src.vfm_models import (
    BREAKPOINTS,
    CheckpointError,
    MissingScaler,
    ModelError,
    ModelSpec,
    NetworkModel,
    UnknownWell,
    Variant,
    adjust_features,
    build_ablation,
    load_checkpoint,
    mtl_predict,
    param_count,
    predict_phase_rates,
    save_checkpoint,
    shared_forward,
    stl_ann_predict,
    stl_ann_spec,
)
from tools.autodiff import ShapeMismatch

SCALER = Scaler(
    shift={"u": 0.0, "p1": 100.0, "p2": 20.0, "T": 50.0, "Q": 500.0},
    scale={"u": 1.0, "p1": 50.0, "p2": 10.0, "T": 20.0, "Q": 1000.0},
)


def random_features(rng, n):
    X = rng.uniform(0, 1, size=(n, 6))
    X[:, 4:] *= 0.5
    return X


def random_model(spec, wells=("W01", "W02", "W03"), seed=0):
    rng = np.random.default_rng(seed)
    model = NetworkModel.initialize(spec, list(wells), rng, scaler=SCALER)
    model.gamma[:] = rng.normal(scale=0.2, size=model.gamma.shape)
    model.beta[:] = rng.normal(scale=0.5, size=model.beta.shape)
    for b in model.biases:
        b[:] = rng.normal(scale=0.1, size=b.shape)
    return model


def reference_forward(model, X, rows):
    """Plain numpy version of the residual network"""
    g, beta = model.gamma[rows], model.beta[rows]
    u = X[:, 0]
    bent = u + sum(g[:, k + 1] * np.maximum(0.0, u - knot) for k, knot in enumerate(BREAKPOINTS))
    z = np.column_stack([(1.0 + g[:, 0]) * bent, X[:, 1:], beta])
    W, b = model.weights, model.biases
    h = z @ W[0] + b[0]
    for k in range(1, len(W) - 1, 2):
        h = h + np.maximum(np.maximum(h, 0) @ W[k] + b[k], 0) @ W[k + 1] + b[k + 1]
    return (h @ W[-1] + b[-1])[:, 0]


def test_zero_gamma_is_identity_on_choke():
    rng = np.random.default_rng(0)
    X = random_features(rng, 1000)
    z = adjust_features(X, np.zeros((1000, 5))).data
    np.testing.assert_array_equal(z, X)


def test_adjust_features_piecewise_linear():
    X = np.zeros((3, 6))
    X[:, 0] = [0.1, 0.5, 0.9]
    gamma = np.tile([0.1, 1.0, 0.0, -0.5, 0.0], (3, 1))
    psi = adjust_features(X, gamma).data[:, 0]
    expected = 1.1 * (X[:, 0] + np.maximum(0, X[:, 0] - 0.2) - 0.5 * np.maximum(0, X[:, 0] - 0.6))
    np.testing.assert_allclose(psi, expected)


def test_adjust_features_shape_checks():
    with pytest.raises(ShapeMismatch):
        adjust_features(np.zeros((3, 5)), np.zeros((3, 5)))
    with pytest.raises(ShapeMismatch):
        adjust_features(np.zeros((3, 6)), np.zeros((2, 5)))


@pytest.mark.parametrize("m_l", [4, 6, 8])
def test_forward_matches_reference(m_l):
    spec = ModelSpec(kind="mtl-universal", m_l=m_l, m_h=8, m_beta=3)
    model = random_model(spec, seed=m_l)
    rng = np.random.default_rng(1)
    X = random_features(rng, 20)
    rows = rng.integers(0, 3, size=20)
    wells = [model.well_ids[r] for r in rows]
    np.testing.assert_allclose(mtl_predict(model, X, wells), reference_forward(model, X, rows), rtol=1e-12)


def test_shared_forward_rejects_wrong_width():
    spec = ModelSpec(kind="mtl-universal", m_beta=2)
    model = random_model(spec)
    with pytest.raises(ShapeMismatch):
        shared_forward(np.zeros((4, 6)), np.zeros((4, 3)), model.weights, model.biases)


def test_task_parameters_change_only_their_well():
    spec = ModelSpec(kind="mtl-universal", m_h=8, m_beta=2)
    model = random_model(spec)
    X = random_features(np.random.default_rng(2), 5)
    before = {w: model.predict_scaled(X, [w] * 5) for w in model.well_ids}
    model.beta[1] += 1.0
    assert np.array_equal(model.predict_scaled(X, ["W01"] * 5), before["W01"])
    assert not np.allclose(model.predict_scaled(X, ["W02"] * 5), before["W02"])


def test_prediction_does_not_depend_on_well_order():
    """Reordering the registered wells (with their task rows) or the samples changes nothing per sample"""
    spec = ModelSpec(kind="mtl-universal", m_h=8, m_beta=2)
    model = random_model(spec)
    order = [2, 0, 1]
    permuted = model.copy()
    permuted.well_ids = [model.well_ids[i] for i in order]
    permuted.gamma = model.gamma[order]
    permuted.beta = model.beta[order]
    rng = np.random.default_rng(7)
    X = random_features(rng, 30)
    wells = [model.well_ids[i] for i in rng.integers(0, 3, size=30)]
    expected = model.predict_scaled(X, wells)
    np.testing.assert_allclose(permuted.predict_scaled(X, wells), expected, rtol=1e-12)
    shuffle = rng.permutation(30)
    shuffled = model.predict_scaled(X[shuffle], [wells[i] for i in shuffle])
    np.testing.assert_allclose(shuffled, expected[shuffle], rtol=1e-12)


def test_unknown_well_and_missing_scaler():
    model = random_model(ModelSpec(kind="mtl-asset"))
    X = random_features(np.random.default_rng(3), 2)
    with pytest.raises(UnknownWell):
        model.predict(X, ["W01", "W99"])
    model.scaler = None
    with pytest.raises(MissingScaler):
        model.predict(X, ["W01", "W01"])


def test_predict_inverts_rate_scaling():
    model = random_model(ModelSpec(kind="mtl-universal", m_h=8))
    X = random_features(np.random.default_rng(4), 6)
    X_phys = X.copy()
    X_phys[:, 1] = X[:, 1] * 50 + 100
    X_phys[:, 2] = X[:, 2] * 10 + 20
    X_phys[:, 3] = X[:, 3] * 20 + 50
    scaled = model.predict_scaled(X, ["W02"] * 6)
    np.testing.assert_allclose(model.predict(X_phys, ["W02"] * 6), scaled * 1000 + 500)


def test_predict_phase_rates_split_total():
    model = random_model(ModelSpec(kind="mtl-universal", m_h=8))
    X = random_features(np.random.default_rng(5), 4)
    rates = predict_phase_rates(model, X, ["W03"] * 4)
    np.testing.assert_allclose(rates.sum(axis=1), model.predict(X, ["W03"] * 4))


@pytest.mark.parametrize("m_l,m_h,m_beta", [(4, 8, 1), (6, 16, 2), (8, 32, 4)])
def test_param_count_closed_form(m_l, m_h, m_beta):
    spec = ModelSpec(kind="mtl-universal", m_l=m_l, m_h=m_h, m_beta=m_beta)
    count = param_count(spec, n_wells=12)
    shared = (6 + m_beta) * m_h + m_h + (m_l - 2) * (m_h * m_h + m_h) + m_h + 1
    assert count.shared == shared
    assert count.per_well == len(BREAKPOINTS) + 1 + m_beta
    assert count.total == shared + 12 * (5 + m_beta)
    assert param_count(spec, 13).total - count.total == 5 + m_beta


def test_param_count_matches_trainable_arrays():
    model = random_model(ModelSpec(kind="mtl-universal", m_h=8, m_beta=2))
    assert param_count(model).total == sum(a.size for a in model.parameters().values())
    stl = random_model(stl_ann_spec(m_h=8), wells=("W01",))
    assert param_count(stl).per_well == 0
    assert set(stl.parameters()) == {f"{p}{k}" for k in range(4) for p in "Wb"}


def test_ablation_variants():
    assert build_ablation(Variant.FULL).m_beta == 2
    assert build_ablation("no-beta").m_beta == 0 and build_ablation("no-beta").train_gamma
    assert build_ablation("no-gamma").m_beta == 2 and not build_ablation("no-gamma").train_gamma
    bare = build_ablation(Variant.NO_BETA_NO_GAMMA)
    assert bare.m_beta == 0 and not bare.train_gamma


def test_model_spec_validation():
    with pytest.raises(ModelError):
        ModelSpec(kind="mtl-universal", m_l=5)
    with pytest.raises(ModelError):
        ModelSpec(kind="mtl-universal", breakpoints=(0.5, 0.3))


def test_stl_ann_predict_uses_the_single_well():
    model = random_model(stl_ann_spec(m_h=8), wells=("W07",))
    X = random_features(np.random.default_rng(6), 3)
    np.testing.assert_allclose(stl_ann_predict(model, X), model.predict_scaled(X, ["W07"] * 3))
    with pytest.raises(ModelError):
        stl_ann_predict(random_model(ModelSpec(kind="mtl-universal")), X)


def test_checkpoint_round_trip_preserves_predictions(tmp_path):
    model = random_model(ModelSpec(kind="mtl-asset", m_l=6, m_h=8, m_beta=2, variant=Variant.FULL))
    model.meta["params"] = {"m_l": 6}
    path = save_checkpoint(model, tmp_path / "ckpt" / "mtl.json")
    loaded = load_checkpoint(path)
    X = random_features(np.random.default_rng(7), 10)
    wells = ["W01", "W02", "W03"] * 3 + ["W01"]
    np.testing.assert_array_equal(loaded.predict(X, wells), model.predict(X, wells))
    assert loaded.spec == model.spec
    assert loaded.meta["params"] == {"m_l": 6}


def test_checkpoint_rejects_unknown_version(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"format_version": 99}')
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.json")
