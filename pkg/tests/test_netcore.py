import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from relevanceflow import netcore
from relevanceflow.exceptions import (
    CorruptFileError,
    DimensionError,
    DivergenceError,
    NonFiniteError,
    VersionMismatchError,
)
from relevanceflow.models import build_network, pointnet2_lite, pointnet_lite
from relevanceflow.netcore import cross_entropy, load_weights, save_weights, softmax, train

from .conftest import TINY_LITE, TINY_PN2, dense_network


def finite_difference_check(network, X, y, h=1e-5, per_tensor=6, seed=0):
    """Largest relative error between analytic and central-difference gradients."""
    rng = np.random.default_rng(seed)
    logits, trace = network.forward(X)
    _, grad = cross_entropy(logits, y)
    analytic = network.backward(trace, grad)
    worst = 0.0
    for key, value in network.params.items():
        flat = value.reshape(-1)
        for i in rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + h
            up, _ = cross_entropy(network.forward(X)[0], y)
            flat[i] = old - h
            down, _ = cross_entropy(network.forward(X)[0], y)
            flat[i] = old
            numeric = (up - down) / (2 * h)
            a = analytic[key].reshape(-1)[i]
            scale = max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, abs(a - numeric) / scale)
    return worst


def separable_set(n=40, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(scale=0.1, size=(n, 16, 3))
    y = np.arange(n) % 2
    X[y == 1, :, 2] += 1.0
    return X, y


class TestForward:
    def test_identity_fully_connected(self):
        net = dense_network([(np.eye(2), np.zeros(2), False)])
        logits, trace = net.forward(np.array([[[1.0, 2.0]]]))
        np.testing.assert_array_equal(logits, [[1.0, 2.0]])
        assert trace.names == ["input", "pool", "fc1"]
        np.testing.assert_array_equal(trace.activation("fc1"), [[1.0, 2.0]])

    def test_zero_input_zero_bias_gives_zero_logits(self):
        net = pointnet_lite(3, **TINY_LITE)
        net.init_params(0)
        for key in net.params:
            if key.endswith(".bias"):
                net.params[key][:] = 0.0
        logits, _ = net.forward(np.zeros((2, 10, 3)))
        np.testing.assert_array_equal(logits, 0.0)

    def test_trace_replay_is_bitwise_identical(self):
        net = pointnet2_lite(3, **TINY_PN2)
        net.init_params(1)
        X = np.random.default_rng(0).normal(size=(2, 40, 3))
        _, t1 = net.forward(X)
        _, t2 = net.forward(X.copy())
        for e1, e2 in zip(t1, t2):
            np.testing.assert_array_equal(e1.output, e2.output)

    def test_trace_records_topology(self):
        net = pointnet2_lite(3, **TINY_PN2)
        net.init_params(1)
        _, trace = net.forward(np.random.default_rng(0).normal(size=(2, 40, 3)))
        pool = trace["SA1-pool"]
        assert pool.meta["argmax"].shape == pool.output.shape
        idx = trace["SA1-sample"].meta["indices"]
        assert all(len(set(row)) == len(row) for row in idx.tolist())
        assert trace["SA1-group"].meta["neighbors"].shape == (2, 16, 4)

    def test_too_few_points(self):
        net = pointnet2_lite(3, **TINY_PN2)
        net.init_params(0)
        with pytest.raises(DimensionError):
            net.forward(np.zeros((1, 10, 3)))

    def test_non_finite_input(self):
        net = pointnet_lite(3, **TINY_LITE)
        net.init_params(0)
        X = np.zeros((1, 5, 3))
        X[0, 0, 0] = np.nan
        with pytest.raises(NonFiniteError):
            net.forward(X)

    def test_wrong_dimension(self):
        net = pointnet_lite(3, **TINY_LITE)
        net.init_params(0)
        with pytest.raises(DimensionError):
            net.forward(np.zeros((1, 5, 2)))

    def test_duplicate_layer_names_rejected(self):
        from relevanceflow.netcore import Dense, Input
        with pytest.raises(ValueError):
            netcore.Network([Input("input", 3), Dense("a", ["input"], 3, 2),
                             Dense("a", ["a"], 2, 2)], 2)


class TestSoftmax:
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
                  elements=st.floats(-30, 30, allow_nan=False)))
    def test_sums_to_one(self, z):
        p = softmax(z)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(p > 0) and np.all(p <= 1)

    def test_cross_entropy_gradient(self):
        z = np.array([[1.0, 2.0, 0.5]])
        loss, grad = cross_entropy(z, np.array([1]))
        assert loss == pytest.approx(-np.log(softmax(z)[0, 1]))
        np.testing.assert_allclose(grad, softmax(z) - [0, 1, 0])


class TestGradientCheck:
    def test_pointnet_lite(self):
        net = pointnet_lite(3, **TINY_LITE)
        net.init_params(3)
        X = np.random.default_rng(1).normal(size=(3, 12, 3))
        assert finite_difference_check(net, X, np.array([0, 1, 2])) < 1e-4

    def test_pointnet2_lite(self):
        net = pointnet2_lite(3, **TINY_PN2)
        net.init_params(4)
        X = np.random.default_rng(2).normal(size=(2, 32, 3))
        assert finite_difference_check(net, X, np.array([0, 2])) < 1e-4

    def test_dense_chain(self):
        rng = np.random.default_rng(5)
        net = dense_network([(rng.normal(size=(3, 5)), rng.normal(size=5), True),
                             (rng.normal(size=(5, 4)), rng.normal(size=4), False)])
        X = rng.normal(size=(4, 1, 3))
        assert finite_difference_check(net, X, np.array([0, 1, 2, 3])) < 1e-4


class TestTrain:
    def test_separable_two_class(self):
        X, y = separable_set()
        net = pointnet_lite(2, **TINY_LITE)
        train(net, X, y, epochs=50, lr=5e-3, batch_size=8, seed=0)
        pred = np.argmax(net.forward(X)[0], axis=1)
        assert np.mean(pred == y) >= 0.99

    def test_zero_epochs_keeps_initial_weights(self):
        X, y = separable_set()
        net = pointnet_lite(2, **TINY_LITE)
        params, history = train(net, X, y, epochs=0, seed=5)
        ref = pointnet_lite(2, **TINY_LITE).init_params(5)
        assert history == []
        for key in ref:
            np.testing.assert_array_equal(params[key], ref[key])

    def test_reproducible(self):
        X, y = separable_set()
        a, ha = train(pointnet_lite(2, **TINY_LITE), X, y, epochs=2, seed=9)
        b, hb = train(pointnet_lite(2, **TINY_LITE), X, y, epochs=2, seed=9)
        assert ha == hb
        for key in a:
            np.testing.assert_array_equal(a[key], b[key])

    def test_loss_decreases(self):
        X, y = separable_set()
        _, history = train(pointnet_lite(2, **TINY_LITE), X, y, epochs=15, lr=5e-3, seed=1)
        assert history[-1] < history[0]

    def test_divergence_is_reported(self):
        X, y = separable_set()
        with np.errstate(all="ignore"), pytest.raises((DivergenceError, NonFiniteError)):
            train(pointnet_lite(2, **TINY_LITE), X, y, epochs=3, lr=1e308, seed=0)

    def test_single_class_rejected(self):
        X, _ = separable_set()
        with pytest.raises(ValueError):
            train(pointnet_lite(2, **TINY_LITE), X, np.zeros(len(X), dtype=int), epochs=1)


class TestWeightsFile:
    def params(self):
        net = build_network("pointnet2_lite", 3, **TINY_PN2)
        return net.init_params(0)

    def test_round_trip_bitwise(self, tmp_path):
        params = self.params()
        save_weights(tmp_path / "w.rfw", params, {"seed": 0})
        loaded, meta = load_weights(tmp_path / "w.rfw")
        assert list(loaded) == list(params)
        for key in params:
            assert loaded[key].tobytes() == params[key].tobytes()
        assert meta == {"seed": 0}

    def test_layout_header(self, tmp_path):
        save_weights(tmp_path / "w.rfw", {"a": np.arange(6.0).reshape(2, 3)})
        blob = (tmp_path / "w.rfw").read_bytes()
        assert blob[:4] == b"RFW1"
        assert int.from_bytes(blob[4:12], "little") == 1
        assert int.from_bytes(blob[12:20], "little") == 1
        assert blob[20:21] == b"a"
        assert int.from_bytes(blob[21:29], "little") == 2
        assert np.frombuffer(blob[45:93], "<f8").tolist() == list(range(6))

    @pytest.mark.parametrize("cut", [3, 10, 30, -5])
    def test_truncated(self, tmp_path, cut):
        save_weights(tmp_path / "w.rfw", self.params(), {"x": 1})
        blob = (tmp_path / "w.rfw").read_bytes()
        (tmp_path / "t.rfw").write_bytes(blob[:cut])
        with pytest.raises(CorruptFileError):
            load_weights(tmp_path / "t.rfw")

    def test_bumped_version(self, tmp_path):
        save_weights(tmp_path / "w.rfw", self.params())
        blob = bytearray((tmp_path / "w.rfw").read_bytes())
        blob[3:4] = b"2"
        (tmp_path / "v.rfw").write_bytes(bytes(blob))
        with pytest.raises(VersionMismatchError):
            load_weights(tmp_path / "v.rfw")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.rfw").write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(CorruptFileError):
            load_weights(tmp_path / "x.rfw")
