import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splitstream.errors import ConfigurationError, DataError, InternalError
from splitstream.models import build_model, instantiate
from splitstream.nn import (
    ActivationKind,
    ActivationLayer,
    ConvLayer,
    DenseLayer,
    FlattenLayer,
    LossKind,
    ModelPart,
    PoolLayer,
    PoolMode,
    activation_forward,
    backprop,
    conv2d_forward,
    dense_forward,
    grad_check,
    loss_forward,
    model_forward,
    pool2d_forward,
    sgd_step,
    sigmoid,
)

from oracles import conv2d_loops, dense_loops, mse_scalar, pool2d_loops, sigmoid_scalar


def _rng(seed=0):
    return np.random.default_rng(seed)


def _conv(k, c, o, rng, bias=None):
    w = rng.normal(size=(k, k, c, o)).astype(np.float32)
    b = rng.normal(size=o).astype(np.float32) if bias is None else np.full(o, bias, np.float32)
    return ConvLayer(w, b)


# conv


def test_identity_kernel_returns_input():
    x = _rng().random((5, 5, 1)).astype(np.float32)
    layer = ConvLayer(np.ones((1, 1, 1, 1), np.float32), np.zeros(1, np.float32))
    np.testing.assert_array_equal(conv2d_forward(x, layer), x)


def test_zero_input_isolates_bias():
    layer = _conv(3, 1, 1, _rng(), bias=0.5)
    out = conv2d_forward(np.zeros((4, 4, 1), np.float32), layer)
    assert out.shape == (2, 2, 1)
    assert np.all(out == 0.5)


def test_conv_matches_loop_oracle():
    rng = _rng(1)
    x = rng.random((6, 6, 1)).astype(np.float32)
    layer = _conv(2, 1, 1, rng)
    ref = conv2d_loops(x, layer.weight, layer.bias)
    assert np.max(np.abs(conv2d_forward(x, layer) - ref)) < 1e-6


def test_conv_bias_added_once_per_output():
    layer = ConvLayer(np.zeros((3, 3, 1, 1), np.float32), np.array([2.0], np.float32))
    out = conv2d_forward(np.ones((5, 5, 1), np.float32), layer)
    assert np.all(out == 2.0)


def test_conv_rejects_channel_mismatch_and_small_input():
    layer = _conv(3, 2, 1, _rng())
    with pytest.raises(ConfigurationError):
        conv2d_forward(np.zeros((5, 5, 1), np.float32), layer)
    with pytest.raises(ConfigurationError):
        conv2d_forward(np.zeros((2, 2, 2), np.float32), layer)


def test_conv_rejects_non_finite_input():
    layer = _conv(1, 1, 1, _rng())
    x = np.zeros((3, 3, 1), np.float32)
    x[1, 1, 0] = np.nan
    with pytest.raises(DataError):
        conv2d_forward(x, layer)


# pool


def test_pool_halves_64():
    out = pool2d_forward(np.zeros((64, 64, 1), np.float32), PoolLayer(2, PoolMode.MAX))
    assert out.shape == (32, 32, 1)


@pytest.mark.parametrize("mode", list(PoolMode))
def test_pool_constant_input(mode):
    out = pool2d_forward(np.full((6, 6, 2), 3.25, np.float32), PoolLayer(2, mode))
    assert np.all(out == 3.25)


def test_pool_hand_case():
    x = np.arange(1, 17, dtype=np.float32).reshape(4, 4, 1)
    mx = pool2d_forward(x, PoolLayer(2, PoolMode.MAX))[..., 0]
    av = pool2d_forward(x, PoolLayer(2, PoolMode.AVG))[..., 0]
    np.testing.assert_array_equal(mx, [[6, 8], [14, 16]])
    np.testing.assert_array_equal(av, [[3.5, 5.5], [11.5, 13.5]])


def test_pool_rejects_non_divisible():
    with pytest.raises(ConfigurationError):
        pool2d_forward(np.zeros((5, 4, 1), np.float32), PoolLayer(2))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31))
def test_pool_properties(s, hm, wm, seed):
    x = _rng(seed).normal(size=(s * hm, s * wm, 2)).astype(np.float32)
    mx = pool2d_forward(x, PoolLayer(max(s, 2) if s > 1 else 2, PoolMode.MAX)) if s > 1 else None
    if s > 1:
        av = pool2d_forward(x, PoolLayer(s, PoolMode.AVG))
        assert np.all(mx >= av)
        # average pooling keeps every channel mean
        np.testing.assert_allclose(av.mean(axis=(0, 1)), x.astype(np.float64).mean(axis=(0, 1)), atol=1e-6)
        assert mx.shape == (hm, wm, 2)


def test_pool_max_gradient_goes_to_first_maximum():
    layer = PoolLayer(2, PoolMode.MAX)
    x = np.array([[[[1.0], [3.0]], [[3.0], [0.0]]]], np.float32)  # tie between (0,1) and (1,0)
    out, cache = layer.forward(x)
    dx, _ = layer.backward(np.ones_like(out), cache)
    np.testing.assert_array_equal(dx[0, ..., 0], [[0, 1], [0, 0]])


def test_pool_avg_gradient_spreads_evenly():
    layer = PoolLayer(2, PoolMode.AVG)
    x = np.zeros((1, 2, 2, 1), np.float32)
    out, cache = layer.forward(x)
    dx, _ = layer.backward(np.ones_like(out), cache)
    assert np.all(dx == 0.25)


# activations and dense


def test_sigmoid_symmetry_point():
    assert activation_forward(np.array([0.0], np.float32), ActivationKind.SIGMOID)[0] == 0.5


def test_leaky_identity_branch():
    x = np.array([0.0, 1.0, 7.25], np.float32)
    np.testing.assert_array_equal(activation_forward(x, ActivationKind.LEAKY_RELU), x)
    assert activation_forward(np.array([-2.0]), ActivationKind.LEAKY_RELU)[0] == pytest.approx(-0.02)


def test_sigmoid_matches_scalar_oracle():
    x = _rng(3).normal(scale=6, size=200)
    ref = np.array([sigmoid_scalar(v) for v in x])
    assert np.max(np.abs(activation_forward(x, ActivationKind.SIGMOID) - ref)) < 1e-7


@given(st.floats(-1e6, 1e6, allow_nan=False))
def test_sigmoid_strictly_inside_unit_interval(v):
    for dtype in (np.float32, np.float64):
        out = sigmoid(np.array([v], dtype))[0]
        assert 0 < out < 1


def test_leaky_derivative_at_zero_is_one():
    layer = ActivationLayer(ActivationKind.LEAKY_RELU)
    out, cache = layer.forward(np.array([[0.0, -1.0]]))
    dx, _ = layer.backward(np.ones_like(out), cache)
    np.testing.assert_allclose(dx, [[1.0, 0.01]])


def test_dense_identity_and_bias():
    x = np.array([1.0, -2.0, 3.0], np.float32)
    ident = DenseLayer(np.eye(3, dtype=np.float32), np.zeros(3, np.float32))
    np.testing.assert_array_equal(dense_forward(x, ident), x)
    b = np.array([0.5, 1.5], np.float32)
    layer = DenseLayer(np.ones((3, 2), np.float32), b)
    np.testing.assert_array_equal(dense_forward(np.zeros(3, np.float32), layer), b)


def test_dense_matches_loop_oracle():
    rng = _rng(4)
    layer = DenseLayer(rng.normal(size=(7, 3)).astype(np.float32), rng.normal(size=3).astype(np.float32))
    x = rng.normal(size=7).astype(np.float32)
    assert np.max(np.abs(dense_forward(x, layer) - dense_loops(x, layer.weight, layer.bias))) < 1e-6


def test_dense_dimension_mismatch():
    with pytest.raises(ConfigurationError):
        dense_forward(np.zeros(4, np.float32), DenseLayer(np.zeros((3, 2), np.float32), np.zeros(2, np.float32)))


# losses


def test_msle_identical_is_zero_and_log_exact():
    y = np.array([0.0, 1.0, 5.5])
    assert loss_forward(y, y, LossKind.MSLE) == 0
    assert loss_forward([math.e - 1], [math.e**2 - 1], LossKind.MSLE) == pytest.approx(1.0, abs=1e-12)


def test_mse_matches_scalar_oracle():
    rng = _rng(5)
    y, yhat = rng.normal(size=50), rng.normal(size=50)
    assert abs(loss_forward(y, yhat, LossKind.MSE) - mse_scalar(y, yhat)) < 1e-9


@pytest.mark.parametrize(
    "kind,y,yhat,index",
    [
        (LossKind.BINARY_CROSSENTROPY, [0, 1, 1], [0.2, 1.0, 0.5], 1),
        (LossKind.BINARY_CROSSENTROPY, [0, 0.5], [0.2, 0.3], 1),
        (LossKind.MSLE, [0.0, 2.0, -1.0], [0.0, 1.0, 1.0], 2),
    ],
)
def test_loss_domain_errors_name_index(kind, y, yhat, index):
    with pytest.raises(DataError, match=str(index)):
        loss_forward(y, yhat, kind)


@settings(max_examples=50)
@given(st.lists(st.floats(0, 50), min_size=1, max_size=20), st.data())
def test_losses_nonnegative(ys, data):
    yhat = data.draw(st.lists(st.floats(0, 50), min_size=len(ys), max_size=len(ys)))
    assert loss_forward(ys, yhat, LossKind.MSE) >= 0
    assert loss_forward(ys, yhat, LossKind.MSLE) >= 0
    assert loss_forward(ys, ys, LossKind.MSLE) == 0
    labels = [float(v > 25) for v in ys]
    probs = [min(max(v / 50, 0.01), 0.99) for v in yhat]
    assert loss_forward(labels, probs, LossKind.BINARY_CROSSENTROPY) >= 0


# model forward / backprop


def _toy_cnn(seed=0, dtype=np.float64):
    rng = _rng(seed)
    conv = ConvLayer(rng.normal(size=(3, 3, 1, 2)) * 0.5, rng.normal(size=2) * 0.1)
    dense = DenseLayer(rng.normal(size=(8, 1)) * 0.5, np.zeros(1))
    layers = [conv, PoolLayer(2, PoolMode.AVG), FlattenLayer(), dense, ActivationLayer(ActivationKind.SIGMOID)]
    return ModelPart(layers, ["c", "p", "f", "d", "s"], (6, 6, 1)).astype(dtype)


def test_empty_part_is_identity():
    x = _rng().random((2, 3, 3, 1)).astype(np.float32)
    out, _ = model_forward(ModelPart([], [], (3, 3, 1)), x)
    np.testing.assert_array_equal(out, x)


def test_conv_then_avg_pool_of_constant():
    conv = ConvLayer(np.ones((1, 1, 1, 1), np.float32), np.zeros(1, np.float32))
    part = ModelPart([conv, PoolLayer(2, PoolMode.AVG)], ["0", "1"], (4, 4, 1))
    out, _ = model_forward(part, np.full((1, 4, 4, 1), 0.75, np.float32))
    assert out.shape == (1, 2, 2, 1) and np.all(out == 0.75)


def test_model_forward_is_composition():
    part = _toy_cnn(1, np.float32)
    x = _rng(2).random((6, 6, 1)).astype(np.float32)
    h = conv2d_forward(x, part.layers[0])
    h = pool2d_forward(h, part.layers[1])
    h = activation_forward(dense_forward(h.reshape(-1), part.layers[3]), ActivationKind.SIGMOID)
    np.testing.assert_array_equal(model_forward(part, x[None])[0][0], h)


def test_model_forward_names_failing_layer():
    part = _toy_cnn()
    with pytest.raises(ConfigurationError, match="input"):
        model_forward(part, np.zeros((1, 5, 5, 1)))
    broken = ModelPart(part.layers[:3] + [DenseLayer(np.zeros((9, 1)), np.zeros(1))], ["c", "p", "f", "d"], None)
    with pytest.raises(ConfigurationError, match="layer 3"):
        model_forward(broken, np.zeros((1, 6, 6, 1)))


def test_forward_is_deterministic():
    part = _toy_cnn(3, np.float32)
    x = _rng(4).random((3, 6, 6, 1)).astype(np.float32)
    assert model_forward(part, x)[0].tobytes() == model_forward(part, x)[0].tobytes()


def test_gradients_zero_at_optimum():
    layer = DenseLayer(np.array([[2.0], [-1.0]]), np.array([0.5]))
    part = ModelPart([layer], ["d"], (2,))
    x = _rng().normal(size=(5, 2))
    y = model_forward(part, x)[0]
    value, grads = backprop(part, x, y, LossKind.MSE)
    assert value == 0
    assert all(np.all(g == 0) for g in grads.values())


def test_duplicated_batch_leaves_mean_gradient_unchanged():
    part = _toy_cnn(5)
    x = _rng(6).random((4, 6, 6, 1))
    y = np.array([[0.0], [1.0], [1.0], [0.0]])
    _, g1 = backprop(part, x, y, LossKind.BINARY_CROSSENTROPY)
    _, g2 = backprop(part, np.concatenate([x, x]), np.concatenate([y, y]), LossKind.BINARY_CROSSENTROPY)
    for k in g1:
        np.testing.assert_allclose(g1[k], g2[k], rtol=1e-12, atol=1e-15)


def test_frozen_leading_layers_get_no_gradient():
    part = _toy_cnn(7)
    x = _rng(8).random((2, 6, 6, 1))
    _, grads = backprop(part, x, np.array([[0.0], [1.0]]), LossKind.BINARY_CROSSENTROPY, trainable={"d.weight", "d.bias"})
    assert set(grads) == {"d.weight", "d.bias"}


# sgd


def test_sgd_zero_gradient_and_arithmetic():
    p = {"w": np.array([1.0]), "v": np.array([4.0])}
    sgd_step(p, {"w": np.array([2.0]), "v": np.array([0.0])}, 0.1)
    assert p["w"][0] == pytest.approx(0.8) and p["v"][0] == 4.0


def test_sgd_missing_gradient_is_internal_error():
    with pytest.raises(InternalError):
        sgd_step({"w": np.zeros(1)}, {}, 0.1)


def test_sgd_quadratic_contraction():
    theta = {"t": np.array([0.0])}
    for _ in range(50):
        sgd_step(theta, {"t": 2 * (theta["t"] - 3)}, 0.1)
    # closed form: 3 - 3 * 0.8**50
    assert abs(theta["t"][0] - 3) < 1e-3
    assert theta["t"][0] == pytest.approx(3 - 3 * 0.8**50, abs=1e-12)


# grad_check


def test_grad_check_linear_mse_exact():
    rng = _rng(9)
    part = ModelPart([DenseLayer(rng.normal(size=(4, 2)), rng.normal(size=2))], ["d"], (4,))
    x, y = rng.normal(size=(6, 4)), rng.normal(size=(6, 2))
    assert grad_check(part, x, y, LossKind.MSE) < 1e-6


def test_grad_check_toy_cnn_and_untouched_model():
    part = _toy_cnn(10, np.float32)
    before = {k: v.copy() for k, v in part.parameters().items()}
    x = _rng(11).random((4, 6, 6, 1)).astype(np.float32)
    y = np.array([[0.0], [1.0], [1.0], [0.0]])
    assert grad_check(part, x, y, LossKind.BINARY_CROSSENTROPY, h=1e-3) < 1e-4
    for k, v in part.parameters().items():
        assert v.tobytes() == before[k].tobytes()


def test_grad_check_detects_planted_fault():
    part = _toy_cnn(12)
    x = _rng(13).random((4, 6, 6, 1))
    y = np.array([[0.0], [1.0], [1.0], [0.0]])
    _, grads = backprop(part, x, y, LossKind.BINARY_CROSSENTROPY)
    grads["d.weight"] = grads["d.weight"].copy()
    grads["d.weight"][0, 0] *= 2
    assert grad_check(part, x, y, LossKind.BINARY_CROSSENTROPY, analytic=grads) > 0.3


def kink_free_batch(part, x, n, margin=0.02):
    """Rows whose hidden leaky-relu inputs all sit at least ``margin`` from 0,
    so +-h perturbations never cross a kink."""
    keep = np.ones(len(x), bool)
    h = x
    for layer in part.layers:
        if isinstance(layer, ActivationLayer):
            keep &= np.all(np.abs(h) > margin, axis=1)
        h = layer.forward(h)[0]
    assert keep.sum() >= n
    return x[keep][:n]


def test_grad_check_cholesterol_mlp():
    part = instantiate(build_model("cholesterol_mlp", seed=3)).astype(np.float64)
    rng = _rng(14)
    x = kink_free_batch(part, rng.normal(size=(400, 7)), 8)
    y = rng.uniform(50, 200, size=(8, 1))
    assert grad_check(part, x, y, LossKind.MSE) < 1e-4


def test_grad_check_rejects_bad_step():
    with pytest.raises(ConfigurationError):
        grad_check(_toy_cnn(), np.zeros((1, 6, 6, 1)), np.zeros((1, 1)), LossKind.MSE, h=0.5)
