import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from silocate.numkernel import (
    Activation,
    DiagGaussian,
    LayerGrad,
    LayerParams,
    ShapeError,
    bce_loss,
    finite_diff_gradcheck,
    flatten_grads,
    flatten_layers,
    kl_diag_gaussian,
    mlp_backward,
    mlp_forward,
    mse_loss,
    sgd_update,
    sigmoid,
    unflatten_into,
)


def identity_layer(w, b):
    return LayerParams(np.array(w, float), np.array(b, float), Activation.IDENTITY)


def random_net(rng, widths, acts=None):
    layers = []
    for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
        act = acts[i] if acts else (Activation.RELU if i < len(widths) - 2 else Activation.IDENTITY)
        layers.append(LayerParams(rng.normal(size=(n_out, n_in)), rng.normal(size=n_out), act))
    return layers


class TestForward:
    def test_identity_matrix(self):
        out, _ = mlp_forward([identity_layer([[1, 0], [0, 1]], [0, 0])], [3.0, 4.0])
        np.testing.assert_array_equal(out, [3.0, 4.0])

    def test_scaled_with_bias(self):
        out, _ = mlp_forward([identity_layer([[2, 0], [0, 3]], [1, -1])], [1.0, 1.0])
        np.testing.assert_array_equal(out, [3.0, 2.0])

    def test_relu(self):
        layer = LayerParams(np.array([[1.0], [-1.0]]), np.zeros(2), Activation.RELU)
        out, _ = mlp_forward([layer], [2.0])
        np.testing.assert_array_equal(out, [2.0, 0.0])

    def test_batch_rows_match_single_calls(self):
        rng = np.random.default_rng(0)
        net = random_net(rng, [3, 5, 2])
        x = rng.normal(size=(4, 3))
        batch, _ = mlp_forward(net, x)
        for i in range(4):
            np.testing.assert_allclose(mlp_forward(net, x[i])[0], batch[i], rtol=1e-14)

    def test_shape_error_names_layer(self):
        net = [identity_layer(np.eye(2), [0, 0]), identity_layer(np.eye(3), [0, 0, 0])]
        with pytest.raises(ShapeError, match="layer 1"):
            mlp_forward(net, [1.0, 2.0])

    def test_bias_length_checked(self):
        with pytest.raises(ShapeError):
            LayerParams(np.eye(2), np.zeros(3))


class TestBackward:
    def test_linear_closed_form(self):
        w = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        layer = identity_layer(w, [0.5, -0.5, 0.0])
        x = np.array([0.3, -1.2])
        g = np.array([1.0, -2.0, 0.5])
        _, cache = mlp_forward([layer], x)
        grads, dx = mlp_backward([layer], cache, g)
        np.testing.assert_allclose(grads[0].weight, np.outer(g, x))
        np.testing.assert_allclose(grads[0].bias, g)
        np.testing.assert_allclose(dx, w.T @ g)

    def test_zero_output_grad(self):
        rng = np.random.default_rng(1)
        net = random_net(rng, [4, 3, 2])
        _, cache = mlp_forward(net, rng.normal(size=4))
        grads, dx = mlp_backward(net, cache, np.zeros(2))
        assert not np.any(flatten_grads(grads))
        assert not np.any(dx)

    def test_cache_mismatch(self):
        rng = np.random.default_rng(2)
        net = random_net(rng, [4, 3, 2])
        _, cache = mlp_forward(net, rng.normal(size=4))
        with pytest.raises(ShapeError):
            mlp_backward(net[:1], cache, np.zeros(3))

    @pytest.mark.parametrize("seed", range(10))
    def test_finite_difference_random_nets(self, seed):
        rng = np.random.default_rng(seed)
        n_layers = rng.integers(1, 4)
        widths = list(rng.integers(1, 17, size=n_layers + 1))
        acts = [Activation(a) for a in rng.choice(["relu", "identity", "sigmoid"], size=n_layers)]
        net = random_net(rng, widths, acts)
        x = rng.normal(size=(3, widths[0]))
        target = rng.normal(size=(3, widths[-1]))

        def loss_of(vec):
            layers = [layer.copy() for layer in net]
            unflatten_into(layers, vec)
            return mse_loss(mlp_forward(layers, x)[0], target)[0]

        out, cache = mlp_forward(net, x)
        _, g = mse_loss(out, target)
        grads, _ = mlp_backward(net, cache, g)
        err = finite_diff_gradcheck(loss_of, flatten_layers(net), flatten_grads(grads), step=1e-6)
        assert err < 1e-5

    def test_input_gradient_finite_difference(self):
        rng = np.random.default_rng(3)
        net = random_net(rng, [5, 4, 3])
        x = rng.normal(size=5)
        _, cache = mlp_forward(net, x)
        _, dx = mlp_backward(net, cache, np.ones(3))
        err = finite_diff_gradcheck(lambda v: float(mlp_forward(net, v)[0].sum()), x, dx)
        assert err < 1e-5


class TestLosses:
    def test_mse_zero(self):
        assert mse_loss([1.0, 2.0], [1.0, 2.0])[0] == 0.0

    def test_mse_hand(self):
        loss, grad = mse_loss([0.0, 0.0], [1.0, 1.0])
        assert loss == 1.0
        np.testing.assert_array_equal(grad, [-1.0, -1.0])
        loss, grad = mse_loss([3.0], [1.0])
        assert loss == 4.0
        np.testing.assert_array_equal(grad, [4.0])

    def test_mse_errors(self):
        with pytest.raises(ShapeError):
            mse_loss([1.0], [1.0, 2.0])
        with pytest.raises(ValueError):
            mse_loss([], [])

    def test_bce_half(self):
        assert bce_loss([0.5], [1.0])[0] == pytest.approx(math.log(2), abs=1e-12)
        assert bce_loss([0.5, 0.5], [0.0, 1.0])[0] == pytest.approx(math.log(2), abs=1e-12)

    def test_bce_perfect_limit(self):
        loss, _ = bce_loss([1.0], [1.0])
        assert 0.0 <= loss < 1e-6

    def test_bce_rejects_non_binary(self):
        with pytest.raises(ValueError):
            bce_loss([0.5], [2.0])

    def test_bce_gradient(self):
        p = np.array([0.2, 0.7, 0.9])
        t = np.array([0.0, 1.0, 0.0])
        _, grad = bce_loss(p, t)
        err = finite_diff_gradcheck(lambda v: bce_loss(v, t)[0], p, grad)
        assert err < 1e-6


class TestKL:
    def test_identical(self):
        g = DiagGaussian([0.3, -1.0], [0.1, -0.4])
        assert kl_diag_gaussian(g, g) == 0.0

    def test_unit_shift(self):
        assert kl_diag_gaussian(DiagGaussian([0.0], [0.0]), DiagGaussian([1.0], [0.0])) == pytest.approx(0.5)

    def test_wider_q(self):
        q = DiagGaussian([0.0], [math.log(4.0)])
        p = DiagGaussian([0.0], [0.0])
        assert kl_diag_gaussian(q, p) == pytest.approx(1.5 - math.log(2.0), abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            kl_diag_gaussian(DiagGaussian([0.0], [0.0]), DiagGaussian([0.0, 0.0], [0.0, 0.0]))

    @settings(max_examples=200, deadline=None)
    @given(
        st.lists(st.floats(-5, 5), min_size=4, max_size=4),
        st.lists(st.floats(-3, 3), min_size=4, max_size=4),
        st.lists(st.floats(-5, 5), min_size=4, max_size=4),
        st.lists(st.floats(-3, 3), min_size=4, max_size=4),
    )
    def test_nonnegative(self, m1, v1, m2, v2):
        assert kl_diag_gaussian(DiagGaussian(m1, v1), DiagGaussian(m2, v2)) >= 0.0

    def test_zero_only_when_equal(self):
        p = DiagGaussian([0.0, 1.0], [0.0, 0.5])
        assert kl_diag_gaussian(DiagGaussian([0.0, 1.0 + 1e-3], [0.0, 0.5]), p) > 0.0
        assert kl_diag_gaussian(DiagGaussian([0.0, 1.0], [1e-3, 0.5]), p) > 0.0


class TestSigmoid:
    def test_values(self):
        assert sigmoid(0.0) == 0.5
        assert sigmoid(math.log(3.0)) == pytest.approx(0.75, abs=1e-15)

    def test_symmetry_and_range(self):
        x = np.random.default_rng(0).uniform(-30, 30, size=1000)
        np.testing.assert_allclose(sigmoid(-x), 1.0 - sigmoid(x), atol=1e-15)
        s = sigmoid(x)
        assert np.all((s > 0) & (s < 1))
        assert np.all(np.diff(sigmoid(np.sort(x))) >= 0)

    def test_extreme_inputs_saturate(self):
        s = sigmoid(np.array([-1000.0, 1000.0]))
        assert np.all(np.isfinite(s))
        np.testing.assert_array_equal(s, [0.0, 1.0])


class TestSGD:
    def test_eta_zero(self):
        layer = identity_layer([[1.0, 2.0]], [3.0])
        new = sgd_update([layer], [LayerGrad(np.ones((1, 2)), np.ones(1))], 0.0)
        np.testing.assert_array_equal(new[0].weight, layer.weight)

    def test_hand_step(self):
        layer = identity_layer([[1.0]], [1.0])
        new = sgd_update([layer], [LayerGrad(np.array([[2.0]]), np.array([2.0]))], 0.1)
        assert new[0].weight[0, 0] == pytest.approx(0.8, abs=1e-15)
        assert new[0].bias[0] == pytest.approx(0.8, abs=1e-15)

    def test_zero_grads(self):
        layer = identity_layer([[1.0, -1.0]], [0.5])
        new = sgd_update([layer], [LayerGrad(np.zeros((1, 2)), np.zeros(1))], 0.3)
        np.testing.assert_array_equal(flatten_layers(new), flatten_layers([layer]))

    def test_shape_mismatch(self):
        layer = identity_layer([[1.0, -1.0]], [0.5])
        with pytest.raises(ShapeError):
            sgd_update([layer], [LayerGrad(np.zeros((2, 2)), np.zeros(1))], 0.1)


class TestGradcheck:
    def test_quadratic(self):
        w = np.array([1.0, 2.0])
        err = finite_diff_gradcheck(lambda v: 0.5 * float(v @ v), w, w.copy())
        assert err < 1e-8

    def test_identity_layer_mse(self):
        rng = np.random.default_rng(5)
        layer = identity_layer(rng.normal(size=(2, 3)), rng.normal(size=2))
        x, t = rng.normal(size=3), rng.normal(size=2)
        out, cache = mlp_forward([layer], x)
        _, g = mse_loss(out, t)
        grads, _ = mlp_backward([layer], cache, g)

        def f(vec):
            ly = [layer.copy()]
            unflatten_into(ly, vec)
            return mse_loss(mlp_forward(ly, x)[0], t)[0]

        assert finite_diff_gradcheck(f, flatten_layers([layer]), flatten_grads(grads)) < 1e-6

    def test_constant_loss(self):
        assert finite_diff_gradcheck(lambda v: 3.0, np.ones(4), np.zeros(4)) == 0.0

    def test_rejects_bad_step_and_nonfinite(self):
        with pytest.raises(ValueError):
            finite_diff_gradcheck(lambda v: 0.0, np.ones(1), np.zeros(1), step=0.0)
        with pytest.raises(FloatingPointError):
            finite_diff_gradcheck(lambda v: float("nan"), np.ones(1), np.zeros(1))

    def test_detects_wrong_gradient(self):
        w = np.array([1.0, 2.0])
        assert finite_diff_gradcheck(lambda v: 0.5 * float(v @ v), w, 2 * w) > 0.1


def test_determinism_bit_identical():
    rng = np.random.default_rng(9)
    net = random_net(rng, [6, 8, 3])
    x = rng.normal(size=(5, 6))
    a, ca = mlp_forward(net, x)
    b, cb = mlp_forward(net, x)
    assert a.tobytes() == b.tobytes()
    ga, _ = mlp_backward(net, ca, np.ones_like(a))
    gb, _ = mlp_backward(net, cb, np.ones_like(b))
    assert flatten_grads(ga).tobytes() == flatten_grads(gb).tobytes()
