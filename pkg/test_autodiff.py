"""
Tests for the reverse-mode differentiation engine and the optimizer
"""

import numpy as np
import pytest

from tools.autodiff import (
    NonFiniteGradient,
    NonScalarLoss,
    OptimizerState,
    ShapeMismatch,
    TotalTooSmall,
    Value,
    adamw_step,
    backward,
    concat,
    lr_schedule,
    matmul,
    max_relative_error,
    maximum,
    numerical_gradient,
    parameter,
    relu,
    slice_,
    square,
    sum_,
)


def check_gradients(build, params, tol=1e-6):
    """Compare backward() against central differences for every leaf in ``params``"""
    loss = build()
    backward(loss, params)
    for p in params:
        numeric = numerical_gradient(lambda: float(build().data), p)
        assert max_relative_error(p.grad, numeric) < tol


def test_backward_simple_expression():
    """d/dx (3x^2 + x) = 6x + 1"""
    x = parameter(np.array([2.0, -1.0]))
    loss = sum_(3.0 * square(x) + x)
    backward(loss, [x])
    np.testing.assert_allclose(x.grad, [13.0, -5.0])


def test_matmul_relu_gradients():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(7, 4))
    W = parameter(rng.normal(size=(4, 3)))
    b = parameter(rng.normal(size=3))
    check_gradients(lambda: sum_(square(relu(matmul(X, W) + b))), [W, b])


def test_matrix_vector_and_vector_matrix_products():
    rng = np.random.default_rng(1)
    A = parameter(rng.normal(size=(3, 4)))
    v = parameter(rng.normal(size=4))
    w = parameter(rng.normal(size=3))
    check_gradients(lambda: sum_(square(A @ v)) + sum_(square(w @ A)), [A, v, w])


def test_broadcast_sub_mul_and_axis_sum():
    rng = np.random.default_rng(2)
    a = parameter(rng.normal(size=(5, 3)))
    c = parameter(rng.normal(size=(1, 3)))
    check_gradients(lambda: sum_(square(sum_((a - c) * a, axis=1))), [a, c])


def test_concat_and_fancy_gather():
    """Repeated row indices accumulate gradient"""
    rng = np.random.default_rng(3)
    table = parameter(rng.normal(size=(4, 2)))
    x = parameter(rng.normal(size=(6, 3)))
    rows = np.array([0, 2, 2, 1, 0, 3])
    check_gradients(lambda: sum_(square(concat([x, slice_(table, rows)], axis=1))), [table, x])


def test_maximum_hinge():
    x = parameter(np.array([0.1, 0.5, 0.9]))
    loss = sum_(maximum(x, 0.4))
    backward(loss, [x])
    np.testing.assert_allclose(loss.data, 0.4 + 0.5 + 0.9)
    np.testing.assert_allclose(x.grad, [0.0, 1.0, 1.0])


def test_backward_resets_gradients_between_calls():
    x = parameter(np.array([1.0, 2.0]))
    for _ in range(2):
        backward(sum_(square(x)), [x])
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_unused_parameter_gets_zero_gradient():
    x, y = parameter(np.ones(2)), parameter(np.ones(2))
    backward(sum_(x), [x, y])
    np.testing.assert_array_equal(y.grad, np.zeros(2))


def test_non_scalar_loss_raises():
    x = parameter(np.ones(3))
    with pytest.raises(NonScalarLoss):
        backward(square(x))


def test_shape_mismatch_raises():
    with pytest.raises(ShapeMismatch):
        matmul(Value(np.ones((2, 3))), Value(np.ones((2, 3))))
    with pytest.raises(ShapeMismatch):
        Value(np.ones(3)) + Value(np.ones(4))


def test_parameter_shares_memory():
    data = np.zeros(3)
    p = parameter(data)
    p.data += 1.0
    np.testing.assert_array_equal(data, np.ones(3))


def test_adamw_first_step_moves_by_lr():
    """Bias-corrected first step is lr * sign(g)"""
    p = parameter(np.array([1.0, -1.0]))
    state = OptimizerState.create([p], lr=0.1)
    p.grad = np.array([0.5, -2.0])
    adamw_step(state, [p])
    np.testing.assert_allclose(p.data, [0.9, -0.9], atol=1e-6)
    assert state.step == 1


def test_adamw_minimizes_quadratic():
    p = parameter(np.array([3.0, -2.0]))
    state = OptimizerState.create([p], lr=0.01)
    for _ in range(3000):
        backward(sum_(square(p - np.array([1.0, 1.0]))), [p])
        adamw_step(state, [p])
    np.testing.assert_allclose(p.data, [1.0, 1.0], atol=1e-2)


def test_adamw_decoupled_decay():
    p = parameter(np.array([2.0]))
    state = OptimizerState.create([p], lr=0.1, weight_decay=0.5)
    adamw_step(state, [p], [np.zeros(1)])
    np.testing.assert_allclose(p.data, [2.0 - 0.1 * 0.5 * 2.0])


def test_adamw_rejects_non_finite_gradient():
    p = parameter(np.ones(2))
    state = OptimizerState.create([p])
    with pytest.raises(NonFiniteGradient):
        adamw_step(state, [p], [np.array([np.nan, 0.0])])


def test_lr_schedule_halves_over_last_window():
    assert lr_schedule(0, 3000) == 1e-3
    assert lr_schedule(2499, 3000) == 1e-3
    assert lr_schedule(2500, 3000) == pytest.approx(5e-4)
    assert lr_schedule(2600, 3000) == pytest.approx(2.5e-4)
    assert lr_schedule(2999, 3000) == pytest.approx(1e-3 / 32)
    assert lr_schedule(0, 500) == pytest.approx(5e-4)


def test_lr_schedule_rejects_short_runs():
    with pytest.raises(TotalTooSmall):
        lr_schedule(0, 499)
    with pytest.raises(ValueError):
        lr_schedule(500, 500)
