import math
import numpy as np
import pytest
from l0_dynamics.exceptions import (
    BackwardBeforeForwardException,
    L0DynamicsException,
    MissingNoiseException,
    ShapeMismatchException,
)
from l0_dynamics.gates import GateVector
from l0_dynamics.gradcheck import gradient_check
from l0_dynamics.layers import ELU, DenseLayer, L0DenseLayer, elu, elu_grad, mse_loss
from l0_dynamics.types.enums import GateGranularity, Mode


def _dense(W, b=None):
    W = np.array(W, dtype=np.float64)
    layer = DenseLayer(W.shape[1], W.shape[0], bias=b is not None)
    layer.W[...] = W
    if b is not None:
        layer.b[...] = np.array(b, dtype=np.float64)
    return layer


def _gated(W, log_alpha, b=None, granularity=GateGranularity.PER_INPUT_ROW):
    W = np.array(W, dtype=np.float64)
    layer = L0DenseLayer(W.shape[1], W.shape[0], bias=b is not None, granularity=granularity)
    layer.W[...] = W
    if b is not None:
        layer.b[...] = np.array(b, dtype=np.float64)
    layer.gates.log_alpha[...] = log_alpha
    return layer


def _interior_layer(seed, granularity, bias=True, in_features=4, out_features=3):
    rng = np.random.default_rng(seed)
    layer = L0DenseLayer(in_features, out_features, bias=bias, granularity=granularity, rng=rng)
    layer.gates.log_alpha[...] = rng.normal(0.0, 0.1, size=layer.gates.shape)
    if bias:
        layer.b[...] = rng.normal(size=out_features)
    x = rng.normal(size=(5, in_features))
    target = rng.normal(size=(5, out_features))
    # Noise near 0.5 keeps every sampled gate away from the hard-sigmoid corners
    noise = rng.uniform(0.4, 0.6, size=layer.gates.shape)
    return layer, x, target, noise


class TestDenseLayer:
    def test_identity(self):
        layer = _dense(np.eye(2), [0.0, 0.0])
        np.testing.assert_array_equal(layer.forward(np.array([[3.0, -1.0]])), [[3.0, -1.0]])

    def test_forward_backward_example(self):
        layer = _dense([[1.0, 2.0]], [0.5])
        x = np.array([[1.0, 1.0]])
        np.testing.assert_allclose(layer.forward(x), [[3.5]])
        dx = layer.backward(np.array([[1.0]]))
        np.testing.assert_allclose(layer.dW, [[1.0, 1.0]])
        np.testing.assert_allclose(layer.db, [1.0])
        np.testing.assert_allclose(dx, [[1.0, 2.0]])

    def test_gradients_accumulate_until_zeroed(self):
        layer = _dense([[1.0, 2.0]], [0.5])
        x = np.array([[1.0, 1.0]])
        for _ in range(2):
            layer.forward(x)
            layer.backward(np.array([[1.0]]))
        np.testing.assert_allclose(layer.dW, [[2.0, 2.0]])
        layer.zero_grad()
        assert not layer.dW.any() and not layer.db.any()

    def test_input_width_checked(self):
        with pytest.raises(ShapeMismatchException):
            _dense(np.eye(2)).forward(np.ones((1, 3)))

    def test_init_bounds(self, rng):
        layer = DenseLayer(16, 8, rng=rng)
        assert np.all(np.abs(layer.W) <= 0.25)
        assert not layer.b.any()
        assert layer.parameter_count == 16 * 8 + 8

    def test_weight_decay(self):
        layer = _dense([[1.0, 2.0]])
        layer.weight_decay = 0.1
        value, grad = layer.weight_decay_and_grad()
        assert value == pytest.approx(0.25)
        np.testing.assert_allclose(grad, [[0.1, 0.2]])


class TestL0DenseLayer:
    def test_open_gates_reproduce_dense(self, rng):
        dense = DenseLayer(4, 3, rng=np.random.default_rng(0))
        dense.b[...] = rng.normal(size=3)
        gated = _gated(dense.W, 20.0, dense.b)
        x = rng.normal(size=(6, 4))
        np.testing.assert_array_equal(gated.forward(x, Mode.INFER), dense.forward(x))

    def test_closed_gates_leave_bias(self):
        layer = _gated([[1.0, 2.0], [3.0, 4.0]], -20.0, [0.5, -0.5])
        y = layer.forward(np.array([[1.0, 1.0], [2.0, 3.0]]), Mode.INFER)
        np.testing.assert_array_equal(y, [[0.5, -0.5], [0.5, -0.5]])

    def test_closed_gates_without_bias(self):
        layer = _gated([[1.0, 2.0]], -20.0)
        assert layer.forward(np.array([[1.0, 1.0]]), Mode.INFER)[0, 0] == 0.0

    def test_row_gate_drops_feature(self):
        layer = _gated([[2.0, 7.0]], np.array([20.0, -20.0]))
        np.testing.assert_allclose(layer.forward(np.array([[1.0, 1.0]]), Mode.INFER), [[2.0]])

    def test_per_element_gates(self):
        layer = _gated(
            [[1.0, 1.0], [1.0, 1.0]],
            np.array([[20.0, -20.0], [-20.0, 20.0]]),
            granularity=GateGranularity.PER_ELEMENT,
        )
        assert layer.gates.shape == (2, 2)
        np.testing.assert_allclose(layer.forward(np.array([[2.0, 3.0]]), Mode.INFER), [[2.0, 3.0]])

    def test_masking_is_linear(self, rng):
        layer = _gated(rng.normal(size=(2, 3)), np.array([20.0, 20.0, 20.0]))
        x = rng.normal(size=(4, 3))
        base = layer.forward(x, Mode.INFER)
        without = x.copy()
        without[:, 1] = 0.0
        contribution = base - layer.forward(without, Mode.INFER)
        layer.W[:, 1] *= 3.0
        scaled = layer.forward(x, Mode.INFER) - layer.forward(without, Mode.INFER)
        np.testing.assert_allclose(scaled, 3.0 * contribution)

    def test_train_requires_noise(self):
        layer = _gated([[1.0, 2.0]], 0.0)
        with pytest.raises(MissingNoiseException):
            layer.forward(np.ones((1, 2)), Mode.TRAIN)

    def test_train_uses_sampled_gates(self):
        layer = _gated([[2.0, 4.0]], 0.0)
        y = layer.forward(np.ones((1, 2)), Mode.TRAIN, np.array([0.5, 0.999]))
        # u = 0.5 gives z = 0.5, u = 0.999 gives z = 1
        np.testing.assert_allclose(y, [[1.0 + 4.0]])

    def test_parameter_blocks(self):
        layer = _gated([[1.0, 2.0]], 0.0, [0.0])
        assert set(layer.parameters()) == {"W", "b", "log_alpha"}
        assert set(layer.gradients()) == {"W", "b", "log_alpha"}
        assert layer.weights_per_gate() == 1

    @pytest.mark.parametrize(
        "layer",
        [DenseLayer(2, 1), L0DenseLayer(2, 1), ELU()],
        ids=["dense", "l0-dense", "elu"],
    )
    def test_backward_before_forward(self, layer):
        with pytest.raises(BackwardBeforeForwardException):
            layer.backward(np.ones((1, 1)))
        assert issubclass(BackwardBeforeForwardException, L0DynamicsException)


class TestActivationsAndLoss:
    @pytest.mark.parametrize(
        "x, expected", [(1.0, 1.0), (0.0, 0.0), (-1.0, math.exp(-1.0) - 1.0)]
    )
    def test_elu(self, x, expected):
        assert float(elu(x)) == pytest.approx(expected)

    def test_elu_grad(self):
        np.testing.assert_allclose(elu_grad(np.array([2.0, -1.0])), [1.0, math.exp(-1.0)])

    def test_elu_layer_backward(self):
        act = ELU()
        act.forward(np.array([[1.0, -1.0]]))
        np.testing.assert_allclose(act.backward(np.array([[2.0, 2.0]])), [[2.0, 2.0 * math.exp(-1.0)]])

    def test_mse_examples(self):
        assert mse_loss(np.ones((2, 2)), np.ones((2, 2)))[0] == 0.0
        assert mse_loss(np.array([[0.0, 0.0]]), np.array([[1.0, 1.0]]))[0] == pytest.approx(1.0)
        loss, grad = mse_loss(np.array([[2.0]]), np.array([[0.0]]))
        assert loss == pytest.approx(4.0)
        np.testing.assert_allclose(grad, [[4.0]])

    def test_mse_shape_checked(self):
        with pytest.raises(ShapeMismatchException):
            mse_loss(np.ones((2, 1)), np.ones((1, 2)))


class TestGradientCheck:
    def test_quadratic(self):
        w = np.array([3.0])
        report = gradient_check(lambda: float(w[0] ** 2), {"w": w}, {"w": np.array([6.0])})
        assert report.passed
        assert report.blocks["w"].max_abs_error < 1e-8
        assert w[0] == 3.0

    def test_wrong_gradient_fails(self):
        w = np.array([3.0])
        report = gradient_check(lambda: float(w[0] ** 2), {"w": w}, {"w": np.array([5.0])})
        assert not report.passed

    def test_non_finite_values_reported(self):
        w = np.array([0.0])
        report = gradient_check(
            lambda: float(np.log(w[0])) if w[0] > 0 else float("nan"),
            {"w": w},
            {"w": np.array([1.0])},
        )
        assert report.blocks["w"].non_finite == 1
        assert not report.passed

    @pytest.mark.parametrize("seed", range(20))
    def test_two_layer_elu_network(self, seed):
        rng = np.random.default_rng(seed)
        first, second, act = DenseLayer(3, 5, rng=rng), DenseLayer(5, 2, rng=rng), ELU()
        first.b[...] = rng.normal(size=5)
        x, target = rng.normal(size=(7, 3)), rng.normal(size=(7, 2))

        def loss() -> float:
            return mse_loss(second.forward(act.forward(first.forward(x))), target)[0]

        _, d_pred = mse_loss(second.forward(act.forward(first.forward(x))), target)
        first.backward(act.backward(second.backward(d_pred)))
        params = {"W1": first.W, "b1": first.b, "W2": second.W, "b2": second.b}
        grads = {"W1": first.dW, "b1": first.db, "W2": second.dW, "b2": second.db}
        report = gradient_check(loss, params, grads)
        assert report.passed, report

    @pytest.mark.parametrize("granularity", list(GateGranularity))
    @pytest.mark.parametrize("seed", range(20))
    def test_l0_dense_train_mode(self, seed, granularity):
        layer, x, target, noise = _interior_layer(seed, granularity)

        def loss() -> float:
            return mse_loss(layer.forward(x, Mode.TRAIN, noise), target)[0]

        _, d_pred = mse_loss(layer.forward(x, Mode.TRAIN, noise), target)
        layer.backward(d_pred)
        report = gradient_check(loss, layer.parameters(), layer.gradients())
        assert report.passed, report

    def test_l0_dense_input_gradient(self):
        layer, x, target, noise = _interior_layer(3, GateGranularity.PER_INPUT_ROW, bias=False)
        _, d_pred = mse_loss(layer.forward(x, Mode.TRAIN, noise), target)
        dx = layer.backward(d_pred)
        report = gradient_check(
            lambda: mse_loss(layer.forward(x, Mode.TRAIN, noise), target)[0],
            {"x": x},
            {"x": dx},
        )
        assert report.passed, report

    def test_gate_vector_is_shared_by_reference(self):
        layer = _gated([[1.0, 2.0]], 0.0)
        assert isinstance(layer.gates, GateVector)
        assert layer.parameters()["log_alpha"] is layer.gates.log_alpha
