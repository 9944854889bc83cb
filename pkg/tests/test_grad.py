import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import gradsuite
from artifact.grad import (
    AdamState, Array, CheckpointError, GradError, NetworkSpec, NonFiniteGradient, ParameterSet, ShapeError,
    adam_step, backward, forward, grad, init_params, load_checkpoint, presets, save_checkpoint, sgd_step,
)
from artifact.grad import layers as L


def _single_linear(w, b):
    spec = NetworkSpec((w.shape[1],), [{"type": "linear", "out": w.shape[0]}])
    ps = ParameterSet()
    ps.add("0.linear.weight", np.asarray(w, np.float64))
    ps.add("0.linear.bias", np.asarray(b, np.float64))
    return spec, ps


class TestForward:
    def test_identity_linear(self):
        spec, ps = _single_linear(np.eye(3), np.zeros(3))
        v = np.array([[1.5, -2.0, 0.25]])
        np.testing.assert_array_equal(forward(spec, ps, v).data, v)

    def test_zero_linear(self):
        spec, ps = _single_linear(np.zeros((2, 4)), np.zeros(2))
        out = forward(spec, ps, np.random.default_rng(0).normal(size=(5, 4))).data
        assert out.shape == (5, 2) and not out.any()

    def test_two_layer_by_hand(self):
        # 2x2 instance: relu(W1 x + b1), then W2 h + b2
        spec = NetworkSpec((2,), [{"type": "linear", "out": 2}, {"type": "relu"}, {"type": "linear", "out": 2}])
        ps = ParameterSet()
        ps.add("0.linear.weight", np.array([[1.0, 2.0], [-1.0, 0.5]]))
        ps.add("0.linear.bias", np.array([0.5, -1.0]))
        ps.add("2.linear.weight", np.array([[2.0, -1.0], [0.0, 3.0]]))
        ps.add("2.linear.bias", np.array([0.0, 1.0]))
        x = np.array([[1.0, 1.0]])
        # h = relu([1+2+0.5, -1+0.5-1]) = [3.5, 0]; out = [7, 1]
        np.testing.assert_allclose(forward(spec, ps, x).data, [[7.0, 1.0]])

    def test_shape_mismatch_names_layer(self):
        spec = presets.mlp(4, 3, 2)
        ps = init_params(spec)
        with pytest.raises(ShapeError) as exc:
            forward(spec, ps, np.zeros((1, 5)))
        assert exc.value.layer == 0

    def test_shape_inference_matches_forward(self):
        spec = presets.densenet((8, 8, 4), 2, 2, 3)
        out = forward(spec, init_params(spec), np.zeros((2, 1, 8, 8, 4), np.float32), training=False)
        assert out.shape == (2, *spec.output_shape)

    def test_deterministic_eval(self):
        spec = presets.residual_encoder((8, 8, 8), blocks=2)
        ps = init_params(spec, 3)
        x = np.random.default_rng(1).random((2, 1, 8, 8, 8)).astype(np.float32)
        a = forward(spec, ps, x, training=False).data
        b = forward(spec, ps, x, training=False).data
        assert np.array_equal(a, b)

    def test_bn_modes(self):
        spec = NetworkSpec((2, 3, 3, 3), [{"type": "bn"}])
        ps = init_params(spec)
        x = np.random.default_rng(0).normal(3.0, 2.0, size=(4, 2, 3, 3, 3))
        out = forward(spec, ps, x, training=True).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3, 4)), 0, atol=1e-5)
        rm = ps.buffers["0.bn.running_mean"]
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3, 4)), rtol=1e-5)
        # eval mode uses the running statistics, not the batch
        ev = forward(spec, ps, x, training=False).data
        assert not np.allclose(ev, out)


class TestBackward:
    def test_square(self):
        w = Array(np.array(3.0), requires_grad=True)
        (g,) = grad(w * w, [w])
        assert g.item() == 6.0

    def test_cross_entropy_at_minimum(self):
        logits = Array(np.array([[60.0, -60.0]]), requires_grad=True)
        (g,) = grad(L.cross_entropy(logits, [0]), [logits])
        assert np.linalg.norm(g.data) < 1e-6

    def test_backward_without_forward(self):
        ps = init_params(presets.mlp(2, 2, 2))
        with pytest.raises(GradError):
            backward(Array(np.array(1.0)), ps)

    def test_second_order(self):
        # d/dx (d/dx x^3) = 6x
        x = Array(np.array(2.0), requires_grad=True)
        (g,) = grad(x * x * x, [x], create_graph=True)
        (h,) = grad(g, [x])
        assert g.item() == pytest.approx(12.0) and h.item() == pytest.approx(12.0)

    @pytest.mark.parametrize("kind", sorted(gradsuite.BLOCKS))
    def test_block_finite_differences(self, kind):
        for seed in range(3):
            r = gradsuite.block_instance(kind, seed)
            assert r.max_rel_error < 1e-3, (kind, seed, r)

    def test_random_conv_net(self):
        rng = np.random.default_rng(7)
        spec = presets.densenet((6, 6, 4), 2, 2, 3, 0.5, 4)
        ps = init_params(spec, rng, dtype=np.float64)
        x = rng.normal(size=(3, 1, 6, 6, 4))
        y = np.array([0, 1, 1])

        def loss(p):
            return L.cross_entropy(forward(spec, p, x, training=True, update_stats=False), y)

        from helpers import check_gradients

        r = check_gradients(lambda p: loss(p).data, ps, backward(loss(ps), ps), rng, per_param=4)
        assert r.max_rel_error < 1e-3


class TestOptimisers:
    def _one(self, value):
        ps = ParameterSet()
        ps.add("p", np.array([value], np.float64))
        return ps

    def test_sgd_example(self):
        ps = sgd_step(self._one(1.0), {"p": Array(np.array([2.0]))}, 0.01)
        assert ps["p"].data[0] == pytest.approx(0.98)

    def test_sgd_zero_grad(self):
        ps = sgd_step(self._one(1.25), {"p": Array(np.array([0.0]))}, 0.1)
        assert ps["p"].data[0] == 1.25

    def test_non_finite_rejected(self):
        ps = self._one(1.0)
        with pytest.raises(NonFiniteGradient):
            sgd_step(ps, {"p": Array(np.array([np.nan]))}, 0.1)
        assert ps["p"].data[0] == 1.0
        with pytest.raises(NonFiniteGradient):
            adam_step(ps, {"p": Array(np.array([np.inf]))}, AdamState(), 0.1)

    def test_sgd_quadratic_monotone(self):
        ps = self._one(5.0)
        losses = []
        for _ in range(100):
            p = ps["p"]
            loss = (p * p).sum()
            losses.append(loss.item())
            sgd_step(ps, backward(loss, ps), 0.05)
        assert all(b < a for a, b in zip(losses, losses[1:]))

    @pytest.mark.parametrize("lr", [1e-6, 1e-3, 0.5])
    def test_adam_first_step(self, lr):
        ps, _ = adam_step(self._one(0.0), {"p": Array(np.array([1.0]))}, AdamState(), lr)
        assert abs(ps["p"].data[0]) == pytest.approx(lr, rel=1e-6)

    def test_adam_zero_grad(self):
        ps, st_ = self._one(2.0), AdamState()
        for _ in range(5):
            adam_step(ps, {"p": Array(np.array([0.0]))}, st_, 0.1)
        assert ps["p"].data[0] == 2.0

    def test_adam_quadratic(self):
        ps, st_ = self._one(3.0), AdamState()
        first = 9.0
        for _ in range(50):
            loss = (ps["p"] * ps["p"]).sum()
            adam_step(ps, backward(loss, ps), st_, 0.2)
        assert (ps["p"].data[0] ** 2) < 0.1 * first

    def test_adam_matches_reference_trace(self):
        # reference update equations written out independently
        ps, st_ = self._one(1.0), AdamState()
        p, m, v = 1.0, 0.0, 0.0
        for t in range(1, 11):
            g = 2 * p
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            p -= 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
            adam_step(ps, {"p": Array(np.array([2 * ps["p"].data[0]]))}, st_, 0.01)
        assert ps["p"].data[0] == pytest.approx(p, rel=1e-12)


class TestDeterminismAndPersistence:
    def _train(self, seed):
        spec = presets.densenet((6, 6, 4), 2, 1, 2)
        ps = init_params(spec, seed)
        rng = np.random.default_rng(seed)
        x = rng.random((4, 1, 6, 6, 4)).astype(np.float32)
        y = np.array([0, 1, 0, 1])
        st_ = AdamState()
        for _ in range(5):
            adam_step(ps, backward(L.cross_entropy(forward(spec, ps, x, training=True), y), ps), st_, 1e-2)
        return ps

    def test_same_seed_bit_identical(self):
        assert self._train(4).equals(self._train(4))
        assert not self._train(4).equals(self._train(5))

    def test_checkpoint_round_trip(self, tmp_path):
        spec = presets.densenet((6, 6, 4), 2, 1, 2)
        ps = self._train(1)
        ps.training = False
        x = np.random.default_rng(2).random((3, 1, 6, 6, 4)).astype(np.float32)
        before = forward(spec, ps, x).data
        save_checkpoint(tmp_path / "m.ckpt", spec, ps)
        spec2, ps2 = load_checkpoint(tmp_path / "m.ckpt")
        assert spec2 == spec and ps2.equals(ps) and ps2.training is False
        assert np.array_equal(forward(spec2, ps2, x).data, before)
        save_checkpoint(tmp_path / "m2.ckpt", spec2, ps2)
        assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()

    def test_corrupt_checkpoint(self, tmp_path):
        spec = presets.mlp(2, 2, 2)
        save_checkpoint(tmp_path / "m.ckpt", spec, init_params(spec))
        raw = bytearray((tmp_path / "m.ckpt").read_bytes())
        raw[-10] ^= 0xFF
        (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "bad.ckpt")
        (tmp_path / "junk.ckpt").write_bytes(b"hello")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "junk.ckpt")

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.sampled_from(["relu", "sigmoid", "linear"]), min_size=1, max_size=5), st.integers(1, 6))
    def test_spec_json_round_trip(self, kinds, width):
        layers = [{"type": k, "out": width} if k == "linear" else {"type": k} for k in kinds]
        spec = NetworkSpec((width,), layers)
        again = NetworkSpec.from_json(spec.to_json())
        assert again == spec and again.to_json() == spec.to_json()

    def test_paper_encoder_embedding_dim(self):
        assert presets.embedding_dim(presets.paper_residual_encoder()) == 2304
