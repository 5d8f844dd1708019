"""
Tests for tensor_core.py

Layer forward passes, loss, reverse-mode gradients and the Adam update.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

import tensor_core as tc
from utils import ConfigurationError, DimensionError, InsufficientSamplesError, TapeStateError


def _layer(kind, weights, bias, activation="identity"):
    return tc.Layer(kind, np.asarray(weights, dtype=float), np.asarray(bias, dtype=float), activation=activation)


# ==================== FORWARD ====================

def test_coordinate_dense_identity():
    """Test identity weights reproduce the input rows."""
    layer = _layer("coordinate_dense", np.eye(2), [0, 0])
    out = tc.coordinate_dense_forward([[[1.0, 2.0]]], layer)
    assert_array_equal(out, [[[1.0, 2.0]]])


def test_coordinate_dense_all_ones_relu():
    """Test all-ones input and weights give 2 in every entry."""
    layer = _layer("coordinate_dense", np.ones((2, 2)), [0, 0], activation="relu")
    out = tc.coordinate_dense_forward(np.ones((1, 2, 2)), layer)
    assert_array_equal(out, np.full((1, 2, 2), 2.0))


def test_coordinate_dense_relu_clips_negative():
    layer = _layer("coordinate_dense", [[1.0]], [0.0], activation="relu")
    assert_array_equal(tc.coordinate_dense_forward([[[-3.0]]], layer), [[[0.0]]])


def test_coordinate_dense_column_mismatch():
    """Test a wrong column count names the column axis."""
    layer = _layer("coordinate_dense", np.eye(2), [0, 0])
    with pytest.raises(DimensionError, match="column axis"):
        tc.coordinate_dense_forward(np.ones((1, 2, 3)), layer)


def test_coordinate_dense_commutes_with_sample_permutation():
    rng = np.random.default_rng(3)
    layer = tc.coordinate_dense_layer(4, 5, rng)
    x = rng.normal(size=(3, 7, 4))
    perm = rng.permutation(7)
    assert_array_equal(tc.coordinate_dense_forward(x[:, perm], layer),
                       tc.coordinate_dense_forward(x, layer)[:, perm])


def test_collapse_mean_and_sdev():
    """Test hand-computed mean and sample standard deviation."""
    x = [[[1.0], [3.0]]]
    assert_allclose(tc.collapse_forward(x, tc.collapse_layer("mean", 1)), [[2.0]])
    assert_allclose(tc.collapse_forward(x, tc.collapse_layer("sdev", 1)), [[np.sqrt(2.0)]])


def test_collapse_constant_input_has_zero_spread():
    x = np.tile([1.5, -2.0, 4.0], (2, 5, 1))
    assert_array_equal(tc.collapse_forward(x, tc.collapse_layer("sdev", 3)), np.zeros((2, 3)))
    assert_array_equal(tc.collapse_forward(x, tc.collapse_layer("cov", 3)), np.zeros((2, 6)))


def test_collapse_cov_matches_two_pass_covariance():
    """Test cov collapse against numpy's covariance on a column pair with c2 = 2 c1."""
    c1 = np.array([0.5, -1.0, 2.0])
    x = np.stack([c1, 2 * c1], axis=1)[None]
    out = tc.collapse_forward(x, tc.collapse_layer("cov", 2))
    expected = np.cov(x[0], rowvar=False, ddof=1)
    assert_allclose(out[0], [expected[0, 0], expected[0, 1], expected[1, 1]], rtol=1e-12)
    assert_allclose(out[0, 1], 2 * np.var(c1, ddof=1), rtol=1e-12)


def test_collapse_projection_is_mean_of_relu():
    layer = _layer("collapse", [[1.0], [-1.0]], [0.5], activation="relu")
    layer.collapse, layer.n_proj = "projection", 1
    x = np.array([[[1.0, 0.0], [0.0, 2.0], [2.0, 1.0]]])
    # rows give 1.5, -1.5 -> 0, 1.5
    assert_allclose(tc.collapse_forward(x, layer), [[1.0]])


@pytest.mark.parametrize("kind", tc.COLLAPSE_KINDS)
def test_collapse_permutation_invariance(kind):
    """Test permuting samples leaves every collapse output bit-identical."""
    rng = np.random.default_rng(11)
    layer = tc.collapse_layer(kind, 4, rng, n_proj=3)
    x = rng.normal(size=(4, 9, 4))
    for _ in range(5):
        perm = rng.permutation(9)
        assert_array_equal(tc.collapse_forward(x[:, perm], layer), tc.collapse_forward(x, layer))


@pytest.mark.parametrize("kind", ["sdev", "cov"])
def test_collapse_needs_two_samples(kind):
    with pytest.raises(InsufficientSamplesError):
        tc.collapse_forward(np.ones((2, 1, 3)), tc.collapse_layer(kind, 3))


def test_collapse_unknown_kind():
    with pytest.raises(ConfigurationError, match="collapsing"):
        tc.collapse_layer("median", 3)


def test_dense_forward_examples():
    """Test identity, hand arithmetic and relu cases for dense layers."""
    x = np.array([[1.0, -2.0]])
    assert_array_equal(tc.dense_forward(x, _layer("dense", np.eye(2), [0, 0])), x)
    assert_allclose(tc.dense_forward([[1.0, 1.0]], _layer("dense", [[0.5], [0.5]], [1.0])), [[2.0]])
    assert_array_equal(tc.dense_forward([[-1.0]], _layer("dense", [[1.0]], [0.0], "relu")), [[0.0]])


def test_dense_rejects_tensor3():
    with pytest.raises(DimensionError):
        tc.dense_forward(np.ones((1, 2, 2)), _layer("dense", np.eye(2), [0, 0]))


def test_activation_layer():
    layer = tc.activation_layer("relu")
    assert_array_equal(tc.activation_forward([[-1.0, 2.0]], layer), [[0.0, 2.0]])
    with pytest.raises(ConfigurationError):
        tc.activation_layer("tanh")


# ==================== LOSS ====================

def test_mse_loss_examples():
    assert tc.mse_loss([[1.0, 2.0]], [[1.0, 2.0]]) == 0.0
    assert tc.mse_loss([[1.0, 1.0]], [[0.0, 0.0]]) == 1.0
    assert tc.mse_loss([[2.0]], [[0.0]]) == 4.0


def test_mse_loss_symmetric_and_shape_checked():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    assert tc.mse_loss(a, b) == tc.mse_loss(b, a) >= 0.0
    with pytest.raises(DimensionError):
        tc.mse_loss(a, b[:, :1])


# ==================== BACKWARD ====================

def test_backward_scalar_chain():
    """Test d/dw (w x - t)^2 = 2 (w x - t) x at w = 1, x = 2, t = 0."""
    layer = _layer("dense", [[1.0]], [0.0])
    tape = tc.Tape([layer])
    out = tape.apply(layer, tape.input([[2.0]]))
    grads = tc.backward(tape, tc.mse_loss_grad(out.value, [[0.0]]))
    assert_allclose(grads, [8.0, 4.0])


def test_backward_zero_gradient():
    rng = np.random.default_rng(1)
    layer = tc.dense_layer(3, 2, rng)
    tape = tc.Tape([layer])
    out = tape.apply(layer, tape.input(rng.normal(size=(4, 3))))
    assert_array_equal(tc.backward(tape, np.zeros_like(out.value)), np.zeros(layer.n_parameters))


def test_backward_without_forward():
    tape = tc.Tape([tc.dense_layer(2, 2, np.random.default_rng(0))])
    with pytest.raises(TapeStateError):
        tc.backward(tape, np.zeros((1, 2)))


def test_backward_non_recording_tape():
    layer = tc.dense_layer(2, 2, np.random.default_rng(0))
    tape = tc.Tape([layer], record=False)
    tape.apply(layer, tape.input(np.ones((1, 2))))
    with pytest.raises(TapeStateError):
        tc.backward(tape, np.zeros((1, 2)))


def _graph(rng, k):
    """A small graph with every layer kind and every collapse kind."""
    layers = {
        "dense_in": tc.coordinate_dense_layer(k, 4, rng, activation="identity"),
        "act": tc.activation_layer("relu"),
        "mean": tc.collapse_layer("mean", 4),
        "sdev": tc.collapse_layer("sdev", 4),
        "cov": tc.collapse_layer("cov", 4),
        "proj": tc.collapse_layer("projection", 4, rng, n_proj=3),
        "post": tc.dense_layer(4 + 4 + 10 + 3, 5, rng),
        "head": tc.dense_layer(5, 2, rng, activation="identity"),
    }
    for layer in layers.values():
        if layer.trainable:
            layer.bias = rng.normal(scale=0.1, size=layer.bias.shape)
    return layers


def _run(layers, x, record=True):
    tape = tc.Tape(list(layers.values()), record=record)
    node = tape.apply(layers["act"], tape.apply(layers["dense_in"], tape.input(x)))
    pooled = tape.concat([tape.apply(layers[name], node) for name in ("mean", "sdev", "cov", "proj")])
    out = tape.apply(layers["head"], tape.apply(layers["post"], pooled))
    return tape, out


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(seed):
    """Test reverse-mode gradients against central differences (h = 1e-6)."""
    rng = np.random.default_rng(seed)
    b, n, k = int(rng.integers(1, 5)), int(rng.integers(2, 9)), int(rng.integers(1, 6))
    layers = _graph(rng, k)
    x = rng.normal(size=(b, n, k))
    target = rng.normal(size=(b, 2))
    trainable = [layer for layer in layers.values() if layer.trainable]

    tape, out = _run(layers, x)
    grads = tc.backward(tape, tc.mse_loss_grad(out.value, target))
    flat = tc.flatten_parameters(trainable)

    def loss_at(params):
        tc.assign_parameters(trainable, params)
        return tc.mse_loss(_run(layers, x, record=False)[1].value, target)

    h = 1e-6
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[i] += h
        down[i] -= h
        numeric[i] = (loss_at(up) - loss_at(down)) / (2 * h)
    tc.assign_parameters(trainable, flat)

    error = np.abs(grads - numeric) / np.maximum(np.maximum(np.abs(grads), np.abs(numeric)), 1e-4)
    assert error.max() < 1e-5


def test_backward_unused_layer_gets_zero_gradient():
    rng = np.random.default_rng(2)
    used, unused = tc.dense_layer(2, 2, rng), tc.dense_layer(2, 2, rng)
    tape = tc.Tape([used, unused])
    out = tape.apply(used, tape.input(np.ones((1, 2))))
    grads = tc.backward(tape, np.ones_like(out.value))
    assert_array_equal(grads[used.n_parameters:], 0.0)


def test_forward_backward_deterministic():
    results = []
    for _ in range(2):
        layers = _graph(np.random.default_rng(42), 3)
        x = np.random.default_rng(7).normal(size=(2, 5, 3))
        tape, out = _run(layers, x)
        results.append((out.value, tc.backward(tape, np.ones_like(out.value))))
    assert_array_equal(results[0][0], results[1][0])
    assert_array_equal(results[0][1], results[1][1])


# ==================== PARAMETERS ====================

def test_assign_parameters_length_checked():
    layer = tc.dense_layer(2, 3, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        tc.assign_parameters([layer], np.zeros(4))


def test_flatten_assign_inverse():
    rng = np.random.default_rng(5)
    layers = [tc.dense_layer(3, 2, rng), tc.collapse_layer("mean", 2), tc.dense_layer(2, 1, rng)]
    flat = rng.normal(size=tc.count_parameters(layers))
    tc.assign_parameters(layers, flat)
    assert_array_equal(tc.flatten_parameters(layers), flat)


def test_glorot_limits():
    weights = tc.glorot_uniform(10, 20, np.random.default_rng(0))
    assert np.all(np.abs(weights) <= np.sqrt(6.0 / 30.0))


# ==================== ADAM ====================

def test_adam_zero_gradient_keeps_params():
    params = np.array([1.0, -2.0])
    updated, state = tc.adam_step(params, np.zeros(2), tc.new_adam_state(2))
    assert_array_equal(updated, params)
    assert state.t == 1


def test_adam_first_step_moves_by_lr():
    updated, _ = tc.adam_step(np.array([1.0]), np.array([0.5]), tc.new_adam_state(1, lr=0.001))
    assert_allclose(updated, [0.999], atol=1e-10)


def test_adam_two_steps_match_scalar_trace():
    """Test two steps with a constant gradient against a hand-written scalar Adam."""
    lr, b1, b2, eps, g = 0.01, 0.9, 0.999, 1e-8, 0.3
    p, m, v = 2.0, 0.0, 0.0
    expected = []
    for t in (1, 2):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        expected.append(p)

    params, state = np.array([2.0]), tc.new_adam_state(1, lr=lr)
    for want in expected:
        params, state = tc.adam_step(params, np.array([g]), state)
        assert abs(params[0] - want) < 1e-12
    assert state.t == 2


def test_adam_does_not_mutate_inputs():
    state = tc.new_adam_state(2)
    params = np.array([1.0, 2.0])
    tc.adam_step(params, np.array([0.1, 0.2]), state)
    assert_array_equal(params, [1.0, 2.0])
    assert state.t == 0 and not state.m.any()


def test_adam_length_mismatch():
    with pytest.raises(DimensionError):
        tc.adam_step(np.zeros(3), np.zeros(2), tc.new_adam_state(3))


def test_adam_state_validation():
    with pytest.raises(ConfigurationError):
        tc.new_adam_state(2, lr=0.0)
    with pytest.raises(ConfigurationError):
        tc.new_adam_state(2, beta1=1.0)
