import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from learndrift.dataset import Pairs
from helpers import random_model
from learndrift.mlp import (
    Activation,
    LossKind,
    MlpModel,
    MlpSpec,
    MlpWeights,
    Normalizer,
    TrainConfig,
    activation,
    activation_deriv,
    input_jacobian,
    loss_value_and_grad,
    param_gradients,
    train,
    validate_model_document,
)


def hand_forward(model, x):
    """Neuron-by-neuron re-implementation with math.erf."""
    n = model.normalizer
    a = [(x[i] - n.in_mean[i]) / n.in_scale[i] for i in range(5)]
    L = len(model.weights.weights)
    for k, (W, b) in enumerate(zip(model.weights.weights, model.weights.biases)):
        z = [sum(W[r, c] * a[c] for c in range(len(a))) + b[r] for r in range(W.shape[0])]
        if k < L - 1:
            if model.spec.activation is Activation.GELU:
                a = [zz * 0.5 * (1 + math.erf(zz / math.sqrt(2))) for zz in z]
            else:
                a = [max(0.0, zz) for zz in z]
        else:
            a = z
    return np.array([a[i] * n.out_scale[i] + n.out_mean[i] for i in range(3)])


def fd_jacobian(model, x, eps=1e-5):
    J = np.empty((3, 5))
    for j in range(5):
        d = np.zeros(5)
        d[j] = eps
        J[:, j] = (model.predict((x + d)[:3], (x + d)[3:]) - model.predict((x - d)[:3], (x - d)[3:])) / (2 * eps)
    return J


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)


class TestActivation:
    def test_gelu_zero(self):
        assert activation("gelu", 0.0) == 0.0
        assert activation_deriv("gelu", 0.0) == 0.5

    def test_relu(self):
        assert activation("relu", -2.0) == 0.0
        assert activation("relu", 3.0) == 3.0
        assert activation_deriv("relu", 0.0) == 0.0
        assert activation_deriv("relu", 1e-9) == 1.0

    def test_gelu_two_high_precision(self):
        mpmath.mp.dps = 40
        oracle = 2 * mpmath.ncdf(2)
        assert activation("gelu", 2.0) == pytest.approx(float(oracle), abs=1e-15)
        assert float(oracle) == pytest.approx(1.95450, abs=5e-6)

    def test_gelu_derivative_fd(self):
        x = np.linspace(-4, 4, 81)
        fd = (activation("gelu", x + 1e-6) - activation("gelu", x - 1e-6)) / 2e-6
        np.testing.assert_allclose(activation_deriv("gelu", x), fd, atol=1e-8)


class TestSpec:
    def test_default_eight_by_sixty_four(self):
        spec = MlpSpec.hidden(8, 64)
        assert spec.layer_sizes == (5,) + (64,) * 8 + (3,)

    @pytest.mark.parametrize("sizes", [(5, 3), (4, 8, 3), (5, 8, 2), (5, 0, 3)])
    def test_invalid(self, sizes):
        with pytest.raises(ValueError):
            MlpSpec(sizes)

    def test_zero_hidden_rejected(self):
        with pytest.raises(ValueError, match="hidden"):
            MlpSpec.hidden(0, 16)


class TestForward:
    def test_zero_weights(self):
        spec = MlpSpec.hidden(2, 8)
        model = MlpModel(spec, MlpWeights.zeros(spec))
        out = model.predict(np.random.default_rng(0).normal(size=(10, 3)), np.zeros((10, 2)))
        np.testing.assert_array_equal(out, 0.0)

    def test_linear_identity_on_v(self):
        spec = MlpSpec.linear_map()
        W = np.hstack([np.eye(3), np.zeros((3, 2))])
        model = MlpModel(spec, MlpWeights([W], [np.zeros(3)]))
        v = np.array([0.3, -1.2, 2.5])
        np.testing.assert_array_equal(model.predict(v, [0.4, -0.9]), v)

    def test_relu_constructed_identity(self):
        # relu(x) - relu(-x) == x, so a width-10 hidden layer can pass v through
        spec = MlpSpec((5, 10, 3), Activation.RELU)
        W1 = np.vstack([np.eye(5), -np.eye(5)])
        W2 = np.hstack([np.eye(5)[:3], -np.eye(5)[:3]])
        model = MlpModel(spec, MlpWeights([W1, W2], [np.zeros(10), np.zeros(3)]))
        v = np.array([-0.7, 1.1, 0.2])
        np.testing.assert_array_equal(model.predict(v, [1.0, 1.0]), v)

    def test_matches_hand_oracle(self):
        model = random_model(2, 8, seed=3)
        rng = np.random.default_rng(5)
        for _ in range(5):
            x = rng.normal(size=5)
            np.testing.assert_allclose(model.predict(x[:3], x[3:]), hand_forward(model, x), atol=1e-12)

    def test_batch_matches_single(self):
        model = random_model(3, 16, seed=1)
        X = np.random.default_rng(2).normal(size=(7, 5))
        batch = model.predict(X[:, :3], X[:, 3:])
        for i in range(7):
            np.testing.assert_allclose(batch[i], model.predict(X[i, :3], X[i, 3:]), atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            MlpModel(MlpSpec.hidden(2, 8), MlpWeights.zeros(MlpSpec.hidden(2, 4)))


class TestJacobian:
    def test_zero_weights(self):
        spec = MlpSpec.hidden(2, 8)
        J = input_jacobian(spec, MlpWeights.zeros(spec), Normalizer(), [1.0, 2, 3], [0.1, 0.2])
        np.testing.assert_array_equal(J, 0.0)

    def test_linear_identity(self):
        spec = MlpSpec.linear_map()
        W = np.hstack([np.eye(3), np.zeros((3, 2))])
        J = input_jacobian(spec, MlpWeights([W], [np.zeros(3)]), Normalizer(), [1.0, 2, 3], [0.1, 0.2])
        np.testing.assert_array_equal(J, W)

    def test_gelu_fd(self):
        model = random_model(4, 32, seed=7)
        X = np.random.default_rng(0).normal(size=(30, 5))
        Js = model.jacobian(X[:, :3], X[:, 3:])
        for x, J in zip(X, Js):
            assert rel_err(J, fd_jacobian(model, x)) < 1e-5

    def test_relu_fd_away_from_kinks(self):
        model = random_model(3, 16, Activation.RELU, seed=2)
        rng = np.random.default_rng(1)
        checked = 0
        from learndrift.mlp import _forward_all

        while checked < 20:
            x = rng.normal(size=5)
            zs, _ = _forward_all(model.spec, model.weights, model.normalizer, x[None])
            if min(np.min(np.abs(z)) for z in zs) < 1e-4:
                continue
            assert rel_err(model.jacobian(x[:3], x[3:]), fd_jacobian(model, x)) < 1e-5
            checked += 1


class TestLoss:
    @pytest.mark.parametrize("kind", list(LossKind))
    def test_zero_at_exact(self, kind):
        v = np.array([1.0, -2.0, 0.5])
        val, g = loss_value_and_grad(kind, 1e-3, v, v)
        assert val == 0.0
        np.testing.assert_array_equal(g, 0.0)

    def test_relative_zero_truth(self):
        val, _ = loss_value_and_grad("relative", 1e-3, [0.001, 0, 0], [0, 0, 0])
        assert val == pytest.approx(1.0, abs=1e-12)

    def test_relative_worked(self):
        val, _ = loss_value_and_grad("relative", 1e-3, [1, -1, 0], [1, -1, 2])
        assert val == pytest.approx(2 / 4.001, abs=1e-12)
        assert val == pytest.approx(0.49988, abs=5e-6)

    def test_l1_l2(self):
        assert loss_value_and_grad("l1", 1.0, [1, 2, 3], [0, 0, 0])[0] == 6
        assert loss_value_and_grad("l2", 1.0, [1, 2, 3], [0, 0, 0])[0] == 14

    # rounded so that any nonzero difference survives squaring
    @given(
        st.sampled_from(list(LossKind)),
        st.lists(st.floats(-10, 10).map(lambda x: round(x, 6)), min_size=3, max_size=3),
        st.lists(st.floats(-10, 10).map(lambda x: round(x, 6)), min_size=3, max_size=3),
    )
    def test_nonnegative(self, kind, a, b):
        val, _ = loss_value_and_grad(kind, 1e-2, a, b)
        assert val >= 0
        assert (val == 0) == (np.sum(np.abs(np.subtract(a, b))) == 0)

    @pytest.mark.parametrize("kind", list(LossKind))
    def test_grad_fd(self, kind):
        rng = np.random.default_rng(0)
        p, t = rng.normal(size=3), rng.normal(size=3)
        _, g = loss_value_and_grad(kind, 0.1, p, t)
        for j in range(3):
            d = np.zeros(3)
            d[j] = 1e-7
            fd = (loss_value_and_grad(kind, 0.1, p + d, t)[0] - loss_value_and_grad(kind, 0.1, p - d, t)[0]) / 2e-7
            assert g[j] == pytest.approx(fd, rel=1e-6)


class TestParamGradients:
    def test_zero_at_exact_predictions(self):
        model = random_model(2, 8, seed=4)
        X = np.random.default_rng(0).normal(size=(12, 5))
        Y = model.predict(X[:, :3], X[:, 3:])
        g, val = param_gradients(model.spec, model.weights, model.normalizer, Pairs(X[:, :3], X[:, 3:], Y), TrainConfig(loss="l2"))
        assert val == pytest.approx(0.0, abs=1e-25)
        assert np.max(np.abs(g.flat())) < 1e-12

    def test_linear_closed_form(self):
        spec = MlpSpec.linear_map()
        rng = np.random.default_rng(1)
        W, b = rng.normal(size=(3, 5)), rng.normal(size=3)
        x, y = rng.normal(size=5), rng.normal(size=3)
        g, _ = param_gradients(spec, MlpWeights([W], [b]), Normalizer(), Pairs(x[:3], x[3:], y), TrainConfig(loss="l2"))
        e = W @ x + b - y
        np.testing.assert_allclose(g.weights[0], 2 * np.outer(e, x), atol=1e-13)
        np.testing.assert_allclose(g.biases[0], 2 * e, atol=1e-13)

    @pytest.mark.parametrize("kind", ["l2", "relative"])
    def test_fd_random_params(self, kind):
        model = random_model(3, 12, seed=9)
        rng = np.random.default_rng(3)
        X, Y = rng.normal(size=(16, 5)), rng.normal(size=(16, 3))
        batch = Pairs(X[:, :3], X[:, 3:], Y)
        cfg = TrainConfig(loss=kind, epsilon=0.1)
        g, _ = param_gradients(model.spec, model.weights, model.normalizer, batch, cfg)
        flat_g = g.flat()
        shapes = [(k, W.shape, "W") for k, W in enumerate(model.weights.weights)] + [
            (k, b.shape, "b") for k, b in enumerate(model.weights.biases)
        ]
        for _ in range(50):
            k, shape, which = shapes[rng.integers(len(shapes))]
            idx = tuple(rng.integers(s) for s in shape)
            arr = (model.weights.weights if which == "W" else model.weights.biases)[k]
            old = arr[idx]
            arr[idx] = old + 1e-6
            up = param_gradients(model.spec, model.weights, model.normalizer, batch, cfg)[1]
            arr[idx] = old - 1e-6
            down = param_gradients(model.spec, model.weights, model.normalizer, batch, cfg)[1]
            arr[idx] = old
            fd = (up - down) / 2e-6
            analytic = ((g.weights if which == "W" else g.biases)[k])[idx]
            assert abs(analytic - fd) <= 1e-4 * max(abs(fd), 1e-3 * np.max(np.abs(flat_g)))


class TestTrain:
    def test_learns_linear_map(self):
        rng = np.random.default_rng(0)
        A, c = rng.normal(size=(3, 5)), rng.normal(size=3)
        X = rng.normal(size=(2000, 5)) * [2, 0.5, 1, 1, 1]
        Y = X @ A.T + c
        tr = Pairs(X[:1600, :3], X[:1600, 3:], Y[:1600])
        te = Pairs(X[1600:, :3], X[1600:, 3:], Y[1600:])
        model, hist = train(MlpSpec.linear_map(), (tr, te), TrainConfig(loss="l2", epochs=150, learning_rate=1e-2, batch_size=64))
        assert hist.test_loss[-1] < 1e-6
        assert len(hist.train_loss) == 150

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        X, Y = rng.normal(size=(300, 5)), rng.normal(size=(300, 3))
        data = Pairs(X[:, :3], X[:, 3:], Y)
        cfg = TrainConfig(epochs=3, batch_size=32)
        a, _ = train(MlpSpec.hidden(2, 8, seed=4), data, cfg)
        b, _ = train(MlpSpec.hidden(2, 8, seed=4), data, cfg)
        assert np.array_equal(a.weights.flat(), b.weights.flat())

    def test_empty(self):
        with pytest.raises(ValueError):
            train(MlpSpec.hidden(1, 4), Pairs(np.zeros((0, 3)), np.zeros((0, 2)), np.zeros((0, 3))), TrainConfig())

    def test_history_csv(self, tmp_path):
        rng = np.random.default_rng(1)
        X, Y = rng.normal(size=(100, 5)), rng.normal(size=(100, 3))
        _, hist = train(MlpSpec.hidden(1, 4), (Pairs(X[:, :3], X[:, 3:], Y),) * 2, TrainConfig(epochs=2))
        hist.write_csv(tmp_path / "h.csv")
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,test_loss" and len(lines) == 3


class TestModelProperties:
    def test_serialization_round_trip(self, tmp_path):
        model = random_model(3, 16, seed=11)
        model.save(tmp_path / "m.json")
        back = MlpModel.load(tmp_path / "m.json")
        X = np.random.default_rng(0).normal(size=(50, 5))
        assert np.array_equal(model.predict(X[:, :3], X[:, 3:]), back.predict(X[:, :3], X[:, 3:]))
        import json

        validate_model_document(json.loads((tmp_path / "m.json").read_text()))

    def test_format_version_checked(self):
        d = random_model().to_dict()
        d["format_version"] = 99
        with pytest.raises(ValueError):
            MlpModel.from_dict(d)

    @pytest.mark.parametrize("act", list(Activation))
    def test_lipschitz_bound(self, act):
        model = random_model(3, 16, act, seed=5)
        bound = model.lipschitz_bound()
        rng = np.random.default_rng(6)
        for _ in range(200):
            a, b = rng.normal(size=5), rng.normal(size=5)
            fa, fb = model.predict(a[:3], a[3:]), model.predict(b[:3], b[3:])
            assert np.linalg.norm(fa - fb) <= bound * np.linalg.norm(a - b) + 1e-12
