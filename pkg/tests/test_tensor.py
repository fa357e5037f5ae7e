import math

import numpy as np
import pytest

from conftest import naive_matmul
from loraprune_lab import tensor as T
from loraprune_lab.errors import DimensionError, InputError, NonFiniteError, UsageError
from loraprune_lab.oracles import finite_diff_grad
from loraprune_lab.tensor import Tape, Tensor


def grads_of(build, *leaves):
    with Tape() as tape:
        loss = build()
    tape.backward(loss)
    return [leaf.grad for leaf in leaves]


class TestShapes:
    def test_scalar_and_vector_promotion(self):
        assert Tensor(3.0).shape == (1, 1)
        assert Tensor([1.0, 2.0, 3.0]).shape == (1, 3)

    def test_rank3_rejected(self):
        with pytest.raises(DimensionError):
            Tensor(np.zeros((2, 2, 2)))

    def test_data_is_float64(self):
        assert Tensor([[1, 2]]).data.dtype == np.float64


class TestMatmul:
    def test_identity(self):
        out = T.matmul(np.eye(2), [[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_one_by_one(self):
        assert T.matmul([[2.0]], [[3.0]]).item() == 6.0

    def test_against_triple_loop(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        np.testing.assert_allclose(T.matmul(a, b).data, naive_matmul(a, b), atol=1e-12, rtol=0)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_backward_rules(self, rng):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        g = rng.normal(size=(3, 2))
        ga, gb = grads_of(lambda: T.reduce_sum(T.hadamard(T.matmul(a, b), g)), a, b)
        np.testing.assert_allclose(ga, g @ b.data.T, atol=1e-12)
        np.testing.assert_allclose(gb, a.data.T @ g, atol=1e-12)


class TestHadamard:
    def test_identity_and_annihilator(self, rng):
        a = rng.normal(size=(3, 2))
        np.testing.assert_array_equal(T.hadamard(a, np.ones_like(a)).data, a)
        np.testing.assert_array_equal(T.hadamard(a, np.zeros_like(a)).data, np.zeros_like(a))

    def test_mask_semantics(self):
        out = T.hadamard([[1.0, 2.0], [3.0, 4.0]], [[1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_array_equal(out.data, [[1, 0], [0, 4]])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.hadamard(np.ones((2, 2)), np.ones((2, 3)))


class TestElementwiseAndLosses:
    def test_relu_sign_split(self):
        np.testing.assert_array_equal(T.relu([-1.0, 2.0]).data, [[0.0, 2.0]])

    def test_uniform_cross_entropy_is_log_c(self):
        for label in range(5):
            loss = T.softmax_cross_entropy(np.full((1, 5), 0.3), [label])
            assert loss.item() == pytest.approx(math.log(5), abs=1e-12)

    def test_cross_entropy_label_out_of_range(self):
        with pytest.raises(InputError):
            T.softmax_cross_entropy(np.zeros((2, 3)), [0, 3])
        with pytest.raises(InputError):
            T.softmax_cross_entropy(np.zeros((2, 3)), [0, -1])

    def test_cross_entropy_label_count(self):
        with pytest.raises(DimensionError):
            T.softmax_cross_entropy(np.zeros((2, 3)), [0])

    def test_mse_gradient_closed_form(self, rng):
        p = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        t = rng.normal(size=(4, 3))
        (g,) = grads_of(lambda: T.mse_loss(p, t), p)
        np.testing.assert_allclose(g, 2 * (p.data - t) / p.data.size, atol=1e-12, rtol=0)
        numeric = finite_diff_grad(lambda: T.mse_loss(p, t).item(), p)
        np.testing.assert_allclose(g, numeric, atol=1e-9)

    def test_layer_norm_constant_row_is_finite(self):
        out = T.layer_norm(np.full((2, 4), 7.0))
        np.testing.assert_array_equal(out.data, np.zeros((2, 4)))

    def test_softmax_rows_sum_to_one(self, rng):
        s = T.softmax(rng.normal(size=(3, 5)) * 50).data
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)

    def test_row_bias_broadcast(self):
        out = T.add(np.zeros((3, 2)), [[1.0, 2.0]])
        np.testing.assert_array_equal(out.data, [[1, 2]] * 3)

    def test_incompatible_add(self):
        with pytest.raises(DimensionError):
            T.add(np.zeros((3, 2)), np.zeros((2, 2)))

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_non_finite_is_caught(self):
        with pytest.raises(NonFiniteError):
            T.scale([[1e308]], 10.0)


class TestBackward:
    def test_sum_gives_ones(self, rng):
        w = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        (g,) = grads_of(lambda: T.reduce_sum(w), w)
        np.testing.assert_array_equal(g, np.ones((2, 3)))

    def test_quadratic(self):
        w = Tensor([[3.0]], requires_grad=True)
        (g,) = grads_of(lambda: T.matmul(T.transpose(w), w), w)
        np.testing.assert_array_equal(g, [[6.0]])

    def test_fan_out_accumulates(self):
        w = Tensor([[2.0]], requires_grad=True)
        (g,) = grads_of(lambda: T.add(T.hadamard(w, w), w), w)
        assert g.item() == 5.0

    def test_repeated_backward_accumulates(self):
        w = Tensor([[1.0, -1.0]], requires_grad=True)
        for _ in range(2):
            with Tape() as tape:
                loss = T.reduce_sum(T.scale(w, 3.0))
            tape.backward(loss)
        np.testing.assert_array_equal(w.grad, [[6.0, 6.0]])
        w.zero_grad()
        assert w.grad is None

    def test_non_scalar_loss(self):
        w = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            out = T.scale(w, 2.0)
        with pytest.raises(UsageError):
            tape.backward(out)

    def test_loss_not_on_tape(self):
        w = Tensor(np.ones((1, 1)), requires_grad=True)
        with Tape():
            loss = T.scale(w, 2.0)
        with Tape() as other:
            pass
        with pytest.raises(UsageError):
            other.backward(loss)

    def test_no_recording_without_tape(self):
        w = Tensor(np.ones((1, 1)), requires_grad=True)
        T.scale(w, 2.0)
        with Tape() as tape:
            pass
        assert tape.nodes == []

    def test_two_layer_mlp_matches_finite_differences(self, rng):
        x, y = rng.normal(size=(5, 4)), rng.integers(0, 3, size=5)
        w1 = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        w2 = Tensor(rng.normal(size=(6, 3)), requires_grad=True)

        def loss():
            return T.softmax_cross_entropy(T.matmul(T.gelu(T.matmul(x, w1)), w2), y)

        analytic = grads_of(loss, w1, w2)
        for leaf, g in zip((w1, w2), analytic):
            numeric = finite_diff_grad(lambda: loss().item(), leaf)
            err = np.max(np.abs(g - numeric)) / max(np.max(np.abs(g)), 1e-12)
            assert err <= 1e-6


class TestSGD:
    def test_direct_update(self):
        w = Tensor([[1.0]], requires_grad=True)
        w.grad = np.array([[2.0]])
        T.sgd_step([w], 0.5)
        assert w.item() == 0.0
        np.testing.assert_array_equal(w.grad, [[2.0]])

    def test_zero_lr(self, rng):
        w = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        before = w.data.copy()
        w.grad = rng.normal(size=(2, 2))
        T.sgd_step([w], 0.0)
        np.testing.assert_array_equal(w.data, before)

    def test_two_steps_on_square(self):
        w = Tensor([[1.0]], requires_grad=True)
        for _ in range(2):
            w.zero_grad()
            grads_of(lambda: T.hadamard(w, w), w)
            T.sgd_step([w], 0.1)
        assert w.item() == pytest.approx(0.64, abs=1e-15)

    def test_missing_grad(self):
        with pytest.raises(UsageError):
            T.sgd_step([Tensor([[1.0]], requires_grad=True)], 0.1)
