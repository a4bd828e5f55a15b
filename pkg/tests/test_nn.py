import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dvnet.gradcheck import check_all_layers
from dvnet.nn import (
    ArchitectureError,
    ArchitectureSpec,
    CheckpointError,
    CheckpointIntegrityError,
    Dense,
    Network,
    TrainConfig,
    activation_backward,
    apply_activation,
    dense_forward,
    deserialize_network,
    init_parameters,
    maxpool2x2,
    maxpool2x2_backward,
    predict_logits,
    serialize_network,
    sgd_step,
    softmax,
    softmax_cross_entropy,
    train_network,
)
from dvnet.tensor import ShapeError, finite_difference_check, matmul

TINY = ArchitectureSpec("Tiny", (1, 8, 8), (("conv2k3p1", "relu", "pool", "flatten"),), ("dense6", "tanh", "dense2"))


def tiny_inputs(n=4, seed=0):
    return [np.random.default_rng(seed).normal(size=(n, 1, 8, 8))]


class TestActivations:
    def test_values(self):
        assert apply_activation("sigmoid", 0.0) == 0.5
        assert apply_activation("tanh", 0.0) == 0.0
        np.testing.assert_array_equal(apply_activation("relu", [-2.0, 3.0]), [0.0, 3.0])

    def test_sigmoid_extremes_are_finite(self):
        out = apply_activation("sigmoid", [-800.0, 800.0])
        np.testing.assert_array_equal(out, [0.0, 1.0])

    def test_backward_values(self):
        assert activation_backward("sigmoid", np.array(0.0), np.array(1.0)) == 0.25
        assert activation_backward("relu", np.array(0.0), np.array(1.0)) == 0.0
        assert activation_backward("relu", np.array(2.0), np.array(3.0)) == 3.0

    @pytest.mark.parametrize("kind", ["sigmoid", "tanh"])
    def test_backward_matches_finite_differences(self, kind):
        x = np.random.default_rng(4).normal(size=20) * 2
        up = np.random.default_rng(5).normal(size=20)
        rep = finite_difference_check(lambda z: np.sum(up * apply_activation(kind, z)), x,
                                      activation_backward(kind, x, up), 1e-5, 1e-6)
        assert rep.passed, rep

    def test_backward_shape_mismatch(self):
        with pytest.raises(ShapeError):
            activation_backward("tanh", np.zeros(3), np.zeros(2))


class TestMaxPool:
    def test_window_enumeration(self):
        x = np.array([[1, 3, 2, 4], [5, 6, 7, 8], [3, 2, 1, 0], [1, 2, 3, 4]], dtype=float)
        expected = [[max(x[r:r + 2, c:c + 2].ravel()) for c in (0, 2)] for r in (0, 2)]
        out, _ = maxpool2x2(x[None])
        np.testing.assert_array_equal(out[0], expected)
        np.testing.assert_array_equal(out[0], [[6, 8], [3, 4]])

    def test_constant(self):
        out, _ = maxpool2x2(np.full((2, 6, 4), 7.5))
        assert out.shape == (2, 3, 2) and np.all(out == 7.5)

    def test_backward_routes_to_argmax_only(self):
        x = np.random.default_rng(0).normal(size=(2, 4, 6))
        out, mask = maxpool2x2(x)
        up = np.random.default_rng(1).normal(size=out.shape)
        g = maxpool2x2_backward(mask, up, x.shape)
        assert np.count_nonzero(g) == up.size
        winners = g != 0
        np.testing.assert_array_equal(x[winners].reshape(-1).size, up.size)
        rep = finite_difference_check(lambda z: np.sum(up * maxpool2x2(z)[0]), x, g, 1e-5, 1e-6)
        assert rep.passed

    def test_odd_extent_rejected_at_construction(self):
        spec = ArchitectureSpec("Odd", (1, 64, 64),
                                (("conv4k3p0", "relu", "pool", "conv4k3p0", "pool", "flatten"),), ("dense2",))
        with pytest.raises(ArchitectureError, match="layer 4"):
            Network(spec)


class TestDense:
    def test_identity(self):
        x = np.array([1.5, -2.0, 3.0])
        np.testing.assert_array_equal(dense_forward(x, np.eye(3), np.zeros(3)), x)

    def test_bias_only(self):
        np.testing.assert_array_equal(dense_forward(np.ones(4), np.zeros((2, 4)), [1.0, 2.0]), [1.0, 2.0])

    def test_matches_matmul_oracle(self):
        rng = np.random.default_rng(9)
        W, x, b = rng.normal(size=(5, 7)), rng.normal(size=7), rng.normal(size=5)
        oracle = matmul(W, x[:, None])[:, 0] + b
        np.testing.assert_allclose(dense_forward(x, W, b), oracle, rtol=0, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dense_forward(np.ones(3), np.ones((2, 4)), np.ones(2))


class TestSoftmaxCrossEntropy:
    def test_uniform_two_classes(self):
        loss, _ = softmax_cross_entropy(np.array([0.0, 0.0]), 0)
        assert loss == pytest.approx(math.log(2), abs=1e-12)

    def test_no_overflow(self):
        loss, grad = softmax_cross_entropy(np.array([1000.0, -1000.0]), 0)
        assert loss == 0.0 and np.all(np.isfinite(grad))

    def test_loss_positive_unless_perfect(self):
        assert softmax_cross_entropy(np.array([1000.0, -1000.0]), 1)[0] > 0
        assert softmax_cross_entropy(np.array([2.0, 1.0]), 0)[0] > 0

    def test_gradient_matches_finite_differences(self):
        z = np.random.default_rng(2).normal(size=6)
        _, grad = softmax_cross_entropy(z, 3)
        rep = finite_difference_check(lambda v: softmax_cross_entropy(v, 3)[0], z, grad, 1e-5, 1e-6)
        assert rep.passed

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            softmax_cross_entropy(np.zeros(3), 3)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(-100, 100))
    def test_probability_vector(self, logits, shift):
        z = np.array(logits)
        q = softmax(z)
        assert np.all(q >= 0)
        assert abs(q.sum() - 1.0) <= 1e-12
        assert np.abs(softmax(z + shift) - q).max() <= 1e-10


class TestSGD:
    def test_single_step(self):
        p = [np.array([1.0])]
        sgd_step(p, [np.array([1.0])], TrainConfig(learning_rate=0.1, l2_weight=0.0))
        assert p[0][0] == pytest.approx(0.9, abs=1e-15)

    def test_zero_gradient_fixed_point(self):
        p = [np.array([1.0, -2.0])]
        sgd_step(p, [np.zeros(2)], TrainConfig(learning_rate=0.3, l2_weight=0.0))
        np.testing.assert_array_equal(p[0], [1.0, -2.0])

    def test_l2_term(self):
        p = [np.array([2.0])]
        sgd_step(p, [np.array([0.0])], TrainConfig(learning_rate=0.5, l2_weight=0.1))
        assert p[0][0] == pytest.approx(2.0 - 0.5 * 0.1 * 2.0)

    def test_quadratic_contraction(self):
        # p - 3 shrinks by (1 - 2*lr) = 0.8 per step: 0.8**200 * 3 ~ 1e-19
        p = [np.array([0.0])]
        cfg = TrainConfig(learning_rate=0.1, l2_weight=0.0)
        for _ in range(200):
            sgd_step(p, [2.0 * (p[0] - 3.0)], cfg)
        assert abs(p[0][0] - 3.0) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            sgd_step([np.zeros(2)], [np.zeros(3)], TrainConfig())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)


class TestInitialization:
    def test_same_seed_identical(self):
        a, b = init_parameters(TINY, 123), init_parameters(TINY, 123)
        for p, q in zip(a.parameters(), b.parameters()):
            assert p.tobytes() == q.tobytes()

    def test_different_seed_differs(self):
        a, b = init_parameters(TINY, 1), init_parameters(TINY, 2)
        assert not np.array_equal(a.parameters()[0], b.parameters()[0])

    def test_biases_zero_weights_bounded(self):
        net = init_parameters(TINY, 5)
        for layer in net.layers():
            if "W" in layer.params:
                assert np.all(layer.params["b"] == 0.0)
                fan_in, fan_out = layer.fans()
                assert np.abs(layer.params["W"]).max() <= math.sqrt(6.0 / (fan_in + fan_out))

    def test_weight_mean_within_three_sigma(self):
        spec = ArchitectureSpec("Wide", (1, 2, 2), (("flatten",),), ("dense400", "relu", "dense250", "dense2"))
        W = Network(spec, 99).trunk[2].params["W"]
        assert W.size == 100_000
        lim = math.sqrt(6.0 / (400 + 250))
        sigma_of_mean = lim / math.sqrt(3.0) / math.sqrt(W.size)
        assert abs(W.mean()) <= 3 * sigma_of_mean

    def test_incompatible_shapes_listed(self):
        spec = ArchitectureSpec("Bad", (1, 4, 4), (("conv2k5p0", "flatten"),), ("dense2",))
        with pytest.raises(ArchitectureError, match=r"layer 0 \(conv2k5p0\)"):
            Network(spec)

    def test_branch_must_end_flat(self):
        spec = ArchitectureSpec("Bad", (1, 4, 4), (("conv2k3p1",),), ("dense2",))
        with pytest.raises(ArchitectureError):
            Network(spec)


class TestLayerContracts:
    def test_backward_before_forward(self):
        with pytest.raises(RuntimeError):
            Dense(3, 2).backward(np.zeros((1, 2)))

    def test_backward_shape_must_match_forward(self):
        d = Dense(3, 2)
        d.forward(np.zeros((4, 3)))
        with pytest.raises(ShapeError):
            d.backward(np.zeros((5, 2)))

    def test_every_layer_passes_gradient_check(self):
        results = check_all_layers(probes=50, eps=1e-5, tol=1e-4, seed=3)
        for layer, reports in results.items():
            for target, rep in reports.items():
                assert rep.passed, (layer, target, rep)
                assert rep.probe_count > 0

    def test_network_gradient_end_to_end(self):
        net = Network(TINY, 7)
        views = tiny_inputs(3, 1)
        labels = np.array([0, 1, 1])
        from dvnet.nn import softmax_cross_entropy_batch

        logits = net.forward(views)
        _, grad = softmax_cross_entropy_batch(logits, labels)
        net.backward(grad)
        W = net.branches[0][0].params["W"]
        analytic = net.branches[0][0].grads["W"].copy()

        def f(value):
            W[...] = value
            return softmax_cross_entropy_batch(net.forward(views), labels)[0]

        rep = finite_difference_check(f, W.copy(), analytic, 1e-5, 1e-4)
        assert rep.passed


class TestTraining:
    def test_one_epoch_bit_identical(self):
        views, labels = tiny_inputs(10, 3), np.arange(10) % 2
        cfg = TrainConfig(learning_rate=0.1, batch_size=3, epochs=1, seed=11)
        a, b = Network(TINY, 4), Network(TINY, 4)
        train_network(a, views, labels, cfg)
        train_network(b, views, labels, cfg)
        assert serialize_network(a) == serialize_network(b)

    def test_minimal_network_fits_easy_synthdata(self):
        from dvnet.fusion import images_to_input
        from dvnet.synthdata import generate_dataset

        ds = generate_dataset(30, 30, "easy", 5)
        spec = ArchitectureSpec("Minimal", (1, 64, 64), (("conv4k3p1", "relu", "pool", "flatten"),), ("dense2",))
        net = Network(spec, 2)
        x = [images_to_input(ds.views("coronal"))]
        cfg = TrainConfig(learning_rate=0.05, batch_size=10, epochs=1, seed=1, l2_weight=0.0)
        acc = 0.0
        for epoch in range(50):
            cfg.seed = epoch
            train_network(net, x, ds.labels, cfg)
            acc = np.mean(predict_logits(net, x).argmax(axis=1) == ds.labels)
            if acc >= 0.95:
                break
        assert acc >= 0.95


class TestCheckpoint:
    def test_round_trip_bytes_and_outputs(self):
        net = Network(TINY, 8)
        train_network(net, tiny_inputs(6, 2), np.arange(6) % 2, TrainConfig(epochs=2, batch_size=2))
        blob = serialize_network(net)
        assert blob.startswith(b"DVNET1\n")
        restored = deserialize_network(blob)
        assert serialize_network(restored) == blob
        x = tiny_inputs(5, 9)
        assert net.forward(x).tobytes() == restored.forward(x).tobytes()

    def test_truncated(self):
        blob = serialize_network(Network(TINY, 1))
        with pytest.raises(CheckpointError) as info:
            deserialize_network(blob[:-20])
        assert info.value.offset >= 0

    def test_bad_magic(self):
        with pytest.raises(CheckpointError, match="offset 0"):
            deserialize_network(b"NOPE" + bytes(20))

    def test_parameter_count_mismatch(self):
        import struct

        blob = serialize_network(Network(TINY, 1))
        body = blob[:-8]
        head_end = body.index(b"\n", 7) + 1
        other = ArchitectureSpec("Tiny", (1, 8, 8), (("conv3k3p1", "relu", "pool", "flatten"),),
                                 ("dense6", "tanh", "dense2"))
        forged = b"DVNET1\n" + f"{other.to_text()}|seed=1\n".encode() + body[head_end:]
        forged += struct.pack("<Q", len(forged))
        with pytest.raises(CheckpointIntegrityError):
            deserialize_network(forged)

    def test_spec_text_round_trip(self):
        assert ArchitectureSpec.from_text(TINY.to_text()) == TINY
