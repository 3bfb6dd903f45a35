import math

import numpy as np
import pytest

from nslnet.errors import DataError, FormatError, ShapeError
from nslnet.gradcheck import check_conv, check_fc, check_full_net, check_softmax, numeric_grad, rel_error
from nslnet.nn import (
    Concat,
    Conv2D,
    Dense,
    LayerGraph,
    LayerSpec,
    MaxPool,
    NiN,
    ReLU,
    TrainConfig,
    build_digit_net,
    digit_net_specs,
    evaluate_accuracy,
    fit,
    learning_rate,
    sgd_step,
    softmax_nll_loss,
    train_epoch,
    xavier_init,
)
from nslnet.nn.checkpoint import MAGIC, checkpoint_bytes, load_checkpoint, load_checkpoint_bytes, save_checkpoint
from nslnet.nn.train import epoch_permutation, evaluate_loss


def conv_loops(x, w, b):
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    out = np.zeros((B, O, H - k + 1, W - k + 1))
    for n in range(B):
        for o in range(O):
            for r in range(H - k + 1):
                for c in range(W - k + 1):
                    out[n, o, r, c] = np.sum(x[n, :, r : r + k, c : c + k] * w[o]) + b[o]
    return out


class TestConv:
    def test_identity_kernel(self):
        conv = Conv2D(1, 1, 1)
        conv.params["weight"][:] = 1.0
        x = np.random.default_rng(0).normal(size=(2, 1, 5, 5)).astype(np.float32)
        np.testing.assert_array_equal(conv.forward(x), x)

    def test_output_size(self):
        conv = Conv2D(1, 3, 5)
        assert conv.out_shape((1, 28, 28)) == (3, 24, 24)

    def test_matches_loops(self):
        rng = np.random.default_rng(1)
        conv = Conv2D(2, 2, 3)
        conv.init_params(rng, np.float64)
        conv.params["bias"] = rng.normal(size=2)
        x = rng.normal(size=(1, 2, 6, 6))
        np.testing.assert_allclose(conv.forward(x), conv_loops(x, conv.params["weight"], conv.params["bias"]), atol=1e-6)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            Conv2D(2, 2, 3).out_shape((3, 6, 6))
        with pytest.raises(ShapeError):
            Conv2D(2, 2, 7).out_shape((2, 6, 6))

    def test_zero_upstream(self):
        rng = np.random.default_rng(2)
        conv = Conv2D(2, 3, 3)
        conv.init_params(rng, np.float64)
        y = conv.forward(rng.normal(size=(2, 2, 5, 5)))
        dx = conv.backward(np.zeros_like(y))
        assert not dx.any() and not conv.grads["weight"].any() and not conv.grads["bias"].any()

    def test_bias_gradient(self):
        rng = np.random.default_rng(3)
        conv = Conv2D(1, 2, 3)
        conv.init_params(rng, np.float64)
        dy = rng.normal(size=(2, 2, 3, 3))
        conv.forward(rng.normal(size=(2, 1, 5, 5)))
        conv.backward(dy)
        np.testing.assert_allclose(conv.grads["bias"], dy.sum(axis=(0, 2, 3)))

    def test_finite_differences_small(self):
        rng = np.random.default_rng(4)
        conv = Conv2D(1, 1, 3)
        conv.init_params(rng, np.float64)
        x = rng.normal(size=(1, 1, 5, 5))
        up = rng.normal(size=(1, 1, 3, 3))
        conv.forward(x)
        dx = conv.backward(up)
        assert rel_error(dx, numeric_grad(lambda: float(np.sum(conv.forward(x) * up)), x)) < 1e-4

    def test_gradcheck_suite(self):
        assert check_conv(trials=3).passed

    def test_full_net_gradcheck(self):
        assert check_full_net(trials=1, seed=4).passed
        assert check_full_net(trials=1, seed=4, with_nin=True).passed
        assert not check_full_net(trials=1, seed=4, corrupt=True).passed


class TestSimpleLayers:
    def test_maxpool_hand_case(self):
        pool = MaxPool(2, 2)
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        np.testing.assert_array_equal(pool.forward(x), [[[[4.0]]]])
        np.testing.assert_array_equal(pool.backward(np.ones((1, 1, 1, 1))), [[[[0, 0], [0, 1]]]])

    def test_maxpool_ties_first_occurrence(self):
        pool = MaxPool(2, 2)
        pool.forward(np.full((1, 1, 2, 2), 5.0))
        np.testing.assert_array_equal(pool.backward(np.ones((1, 1, 1, 1))), [[[[1, 0], [0, 0]]]])

    def test_maxpool_matches_loops(self):
        x = np.random.default_rng(5).normal(size=(2, 3, 8, 8))
        out = MaxPool(2, 2).forward(x)
        expected = x.reshape(2, 3, 4, 2, 4, 2).max(axis=(3, 5))
        np.testing.assert_array_equal(out, expected)

    def test_relu(self):
        relu = ReLU()
        x = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
        np.testing.assert_array_equal(relu.forward(x), [0, 0, 0, 0.5, 2.0])
        np.testing.assert_array_equal(relu.backward(np.ones(5)), [0, 0, 0, 1, 1])

    def test_nin_is_gated(self):
        nin = NiN(3, 2)
        nin.init_params(np.random.default_rng(0), np.float64)
        y = nin.forward(np.random.default_rng(1).normal(size=(2, 3, 4, 4)))
        assert y.shape == (2, 2, 4, 4) and y.min() >= 0

    def test_concat_round_trip(self):
        cat = Concat(2)
        a, b = np.ones((2, 3, 4, 4)), np.zeros((2, 5, 4, 4))
        assert cat.out_shape([(3, 4, 4), (5, 4, 4)]) == (8, 4, 4)
        y = cat.forward([a, b])
        da, db = cat.backward(y)
        np.testing.assert_array_equal(da, a)
        np.testing.assert_array_equal(db, b)
        with pytest.raises(ShapeError):
            cat.out_shape([(3, 4, 4), (5, 3, 4)])

    def test_dense(self):
        fc = Dense(3, 2)
        fc.params["weight"] = np.array([[1.0, 0, 0], [0, 1, 1]])
        fc.params["bias"] = np.array([0.5, -1])
        np.testing.assert_array_equal(fc.forward(np.array([[1.0, 2, 3]])), [[1.5, 4.0]])
        assert check_fc(trials=3).passed


class TestSoftmaxLoss:
    def test_uniform(self):
        loss, _ = softmax_nll_loss(np.zeros((4, 10)), np.arange(4))
        assert loss == pytest.approx(math.log(10), abs=1e-12)
        assert loss == pytest.approx(2.302585, abs=1e-6)

    def test_large_margin(self):
        logits = np.zeros((1, 10))
        logits[0, 3] = 1e3
        loss, grad = softmax_nll_loss(logits, np.array([3]))
        assert loss < 1e-12
        assert np.abs(grad).max() < 1e-12

    def test_gradient_formula(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(3, 5))
        labels = np.array([0, 4, 2])
        _, grad = softmax_nll_loss(logits, labels)
        p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        np.testing.assert_allclose(grad, (p - np.eye(5)[labels]) / 3, atol=1e-15)
        assert check_softmax(trials=5).passed

    def test_bad_labels(self):
        with pytest.raises(DataError):
            softmax_nll_loss(np.zeros((2, 10)), np.array([0, 10]))
        with pytest.raises(DataError):
            softmax_nll_loss(np.zeros((2, 10)), np.array([-1, 0]))


class TestXavier:
    def test_variance_and_mean(self):
        w = xavier_init((100_000,), 30, 70, np.random.default_rng(0), np.float64)
        assert w.var() == pytest.approx(2 / 100, rel=0.05)
        assert abs(w.mean()) < 3 * np.sqrt(2 / 100) / np.sqrt(w.size)

    def test_fan_in_mode(self):
        w = xavier_init((100_000,), 25, 3000, np.random.default_rng(0), np.float64, mode="fan_in")
        assert w.var() == pytest.approx(1 / 25, rel=0.05)

    def test_deterministic(self):
        a = xavier_init((5, 5), 5, 5, np.random.default_rng(9))
        b = xavier_init((5, 5), 5, 5, np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)

    def test_biases_zero(self):
        net = build_digit_net(seed=3)
        for name, p in net.params.items():
            if name.endswith("bias"):
                assert not p.any()


class TestSchedule:
    def test_constant_then_decay(self):
        cfg = TrainConfig()
        assert learning_rate(1, cfg) == 0.01
        assert learning_rate(9, cfg) == 0.01
        assert learning_rate(10, cfg) == 0.01
        assert learning_rate(12, cfg) == pytest.approx(0.0025)

    def test_sgd_step(self):
        p = {"w": np.ones(3)}
        sgd_step(p, {"w": np.zeros(3)}, 1, TrainConfig())
        np.testing.assert_array_equal(p["w"], 1.0)
        sgd_step(p, {"w": np.full(3, 2.0)}, 12, TrainConfig())
        np.testing.assert_allclose(p["w"], 1 - 0.0025 * 2)
        with pytest.raises(ShapeError):
            sgd_step(p, {"w": np.zeros(2)}, 1, TrainConfig())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(lr0=0)

    def test_permutation(self):
        a = epoch_permutation(100, 0, 1)
        np.testing.assert_array_equal(np.sort(a), np.arange(100))
        np.testing.assert_array_equal(a, epoch_permutation(100, 0, 1))
        assert not np.array_equal(a, epoch_permutation(100, 0, 2))


class TestDigitNet:
    def test_shape_chain_with_nsl(self):
        net = build_digit_net(with_nsl=True)
        s = net.shapes
        assert s["conv1"] == (120, 24, 24)
        assert s["pool1"] == (120, 12, 12)
        assert s["nsl"] == (120, 12, 12)
        assert s["conv2"] == (48, 8, 8)
        assert s["pool2"] == (48, 4, 4)
        assert s["flatten"] == (768,)
        assert s["fc1"] == (100,) and s["fc2"] == (100,) and s["fc3"] == (10,)

    def test_logits_shape(self):
        net = build_digit_net(with_nsl=False)
        x = np.random.default_rng(0).random((64, 1, 28, 28), dtype=np.float32)
        assert net.logits(x).shape == (64, 10)
        np.testing.assert_allclose(net.forward(x[:3]).sum(axis=1), 1.0, rtol=1e-6)

    def test_parameter_parity(self):
        assert build_digit_net(True).parameter_count() == build_digit_net(False).parameter_count()

    def test_nin_concat(self):
        net = build_digit_net(with_nsl=True, with_nin=True)
        assert net.shapes["cat"] == (145, 12, 12)
        assert net.layers[[s.id for s in net.specs].index("conv2")].in_channels == 145
        x = np.random.default_rng(0).random((2, 1, 28, 28))
        assert net.logits(x).shape == (2, 10)

    def test_bad_input_shape(self):
        with pytest.raises(ShapeError):
            build_digit_net().logits(np.zeros((1, 1, 32, 32)))

    def test_descriptor_round_trip(self):
        net = build_digit_net(with_nin=True)
        again = LayerGraph.from_descriptor(net.descriptor())
        assert again.descriptor() == net.descriptor()
        assert again.shapes == net.shapes

    def test_bad_wiring(self):
        specs = [LayerSpec("a", "relu", {}, ("missing",))]
        with pytest.raises(ShapeError):
            LayerGraph(specs, (1, 4, 4))
        with pytest.raises(ShapeError):
            LayerGraph([LayerSpec("c1", "conv", {"in": 1, "out": 3, "k": 3}),
                        LayerSpec("c2", "conv", {"in": 4, "out": 2, "k": 3})], (1, 8, 8))
        assert LayerGraph(digit_net_specs(True, False, maps=100), (1, 28, 28)).shapes["nsl"] == (120, 12, 12)

    def test_fan_out_gradient_accumulates(self):
        # pool1 feeds both the similarity layer and the 1x1 branch
        rng = np.random.default_rng(1)
        net = build_digit_net(with_nsl=True, with_nin=True, precision="double", seed=1)
        x = rng.random((1, 1, 28, 28))
        label = np.array([3])
        _, d = softmax_nll_loss(net.logits(x), label)
        dx = net.backward(d)
        idx = rng.choice(x.size, size=6, replace=False)
        numeric = numeric_grad(lambda: softmax_nll_loss(net.logits(x), label)[0], x, index=idx)
        assert rel_error(dx.reshape(-1)[idx], numeric.reshape(-1)[idx]) < 1e-4


class TestTraining:
    def test_always_class_zero(self):
        net = build_digit_net(with_nsl=False, seed=None)
        net.set_param("fc3.bias", np.eye(10)[0].astype(np.float32))
        x = np.random.default_rng(0).random((20, 1, 28, 28), dtype=np.float32)
        assert evaluate_accuracy(net, x, np.zeros(20, dtype=int)) == 1.0

    def test_overfit_single_batch(self):
        rng = np.random.default_rng(0)
        x = rng.random((64, 1, 28, 28), dtype=np.float32)
        y = rng.integers(0, 10, size=64)
        net = build_digit_net(with_nsl=True, seed=0)
        cfg = TrainConfig(batch_size=64, epochs=200)
        for epoch in range(1, 201):
            train_epoch(net, x, y, 1, cfg)
            if epoch % 25 == 0 and evaluate_accuracy(net, x, y) == 1.0:
                break
        assert evaluate_accuracy(net, x, y) == 1.0

    def test_deterministic_and_thread_invariant(self):
        rng = np.random.default_rng(1)
        x = rng.random((96, 1, 28, 28), dtype=np.float32)
        y = rng.integers(0, 10, size=96)
        cfg = TrainConfig(batch_size=32, epochs=2, seed=4)
        runs = []
        for workers in (1, 1, 3):
            net = build_digit_net(with_nsl=True, workers=workers, seed=4)
            runs.append(fit(net, x, y, cfg))
        assert runs[0] == runs[1] == runs[2]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            train_epoch(build_digit_net(), np.zeros((4, 1, 28, 28)), np.zeros(3, dtype=int), 1, TrainConfig())


class TestCheckpoint:
    def test_round_trip_bytes(self, tmp_path):
        net = build_digit_net(with_nin=True, seed=5)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(net, p1)
        save_checkpoint(load_checkpoint(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert p1.read_bytes().startswith(MAGIC)

    def test_loaded_net_predicts_identically(self, tmp_path):
        net = build_digit_net(seed=6)
        save_checkpoint(net, tmp_path / "n.ckpt")
        again = load_checkpoint(tmp_path / "n.ckpt")
        x = np.random.default_rng(0).random((16, 1, 28, 28), dtype=np.float32)
        y = np.random.default_rng(1).integers(0, 10, size=16)
        np.testing.assert_array_equal(net.logits(x), again.logits(x))
        assert evaluate_accuracy(net, x, y) == evaluate_accuracy(again, x, y)
        assert evaluate_loss(net, x, y) == evaluate_loss(again, x, y)

    def test_bad_magic(self):
        data = bytearray(checkpoint_bytes(build_digit_net(seed=0)))
        data[0:1] = b"X"
        with pytest.raises(FormatError):
            load_checkpoint_bytes(bytes(data))

    def test_bad_version(self):
        data = bytearray(checkpoint_bytes(build_digit_net(seed=0)))
        data[len(MAGIC)] = 9
        with pytest.raises(FormatError):
            load_checkpoint_bytes(bytes(data))

    @pytest.mark.parametrize("cut", [10, 200, -100])
    def test_truncated(self, cut):
        data = checkpoint_bytes(build_digit_net(seed=0))
        with pytest.raises(OSError):
            load_checkpoint_bytes(data[:cut])
