import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iimt import autodiff as ad
from iimt.autodiff import Tensor

from helpers import check_gradients, fd_gradient, rel_err


def randt(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        eye = Tensor(np.eye(2))
        out = eye @ Tensor(np.eye(2))
        assert np.array_equal(out.data, np.eye(2))

    def test_hand_arithmetic(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[1.0], [1.0]])
        assert np.array_equal((a @ b).data, [[3.0], [7.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))

    def test_gradient(self):
        rng = np.random.default_rng(0)
        a, b = randt(rng, 5, 4), randt(rng, 4, 3)
        check_gradients(lambda: ((a @ b) * (a @ b)).sum(), {"a": a, "b": b})

    def test_batched_gradient(self):
        rng = np.random.default_rng(1)
        a, b = randt(rng, 3, 4, 2), randt(rng, 3, 2, 5)
        check_gradients(lambda: ((a @ b) * (a @ b)).sum(), {"a": a, "b": b})


class TestSoftmax:
    def test_uniform(self):
        out = ad.softmax(Tensor([0.0, 0.0, 0.0]))
        assert np.allclose(out.data, [1 / 3] * 3)

    def test_large_logit_no_overflow(self):
        out = ad.softmax(Tensor([1000.0, 0.0, 0.0]))
        assert np.all(np.isfinite(out.data))
        assert out.data[0] == pytest.approx(1.0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
    def test_rows_sum_to_one(self, row):
        out = ad.softmax(Tensor([row]), axis=-1)
        assert abs(out.data.sum() - 1.0) < 1e-12

    def test_gradient(self):
        rng = np.random.default_rng(2)
        x = randt(rng, 3, 7)
        w = Tensor(rng.normal(size=(3, 7)))
        check_gradients(lambda: (ad.softmax(x, axis=-1) * w).sum(), {"x": x})


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        gain, bias = Tensor(np.ones(4)), Tensor(np.zeros(4))
        out = ad.layer_norm(Tensor([[5.0, 5.0, 5.0, 5.0]]), gain, bias)
        assert np.allclose(out.data, 0.0)

    def test_two_point_row(self):
        gain, bias = Tensor(np.ones(2)), Tensor(np.zeros(2))
        out = ad.layer_norm(Tensor([[1.0, 3.0]]), gain, bias, eps=0.0)
        assert np.allclose(out.data, [[-1.0, 1.0]])

    def test_gradient(self):
        rng = np.random.default_rng(3)
        x = randt(rng, 4, 8)
        gain = Tensor(rng.normal(1.0, 0.1, size=8), requires_grad=True)
        bias = Tensor(rng.normal(0.0, 0.1, size=8), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 8)))
        check_gradients(
            lambda: (ad.layer_norm(x, gain, bias) * w).sum(),
            {"x": x, "gain": gain, "bias": bias})


class TestBackward:
    def test_sum_gives_ones(self):
        x = randt(np.random.default_rng(4), 2, 3)
        x.sum().backward()
        assert np.array_equal(x.grad, np.ones((2, 3)))

    def test_square_derivative(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        (x * x).sum().backward()
        assert np.allclose(x.grad, [2.0, 4.0])

    def test_non_scalar_rejected(self):
        x = randt(np.random.default_rng(5), 3)
        with pytest.raises(ad.GradError, match="scalar"):
            (x * x).backward()

    def test_repeated_backward_rejected(self):
        x = randt(np.random.default_rng(6), 3)
        loss = x.sum()
        loss.backward()
        with pytest.raises(ad.GradError, match="already"):
            loss.backward()

    def test_shared_subexpression_accumulates(self):
        # y used twice: d/dx sum(y + y) with y = x*x is 4x, not 2x
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        y = x * x
        (y + y).sum().backward()
        assert np.allclose(x.grad, 4.0 * x.data)

    def test_no_grad_blocks_recording(self):
        x = randt(np.random.default_rng(7), 2)
        with ad.no_grad():
            y = (x * x).sum()
        assert y._parents == ()
        with pytest.raises(ad.GradError):
            y.backward()
        assert x.grad is None


class TestElementwise:
    @pytest.mark.parametrize("op", [ad.sigmoid, ad.gelu, ad.relu, ad.texp])
    def test_gradient(self, op):
        rng = np.random.default_rng(8)
        x = randt(rng, 3, 5)
        w = Tensor(rng.normal(size=(3, 5)))
        check_gradients(lambda: (op(x) * w).sum(), {"x": x})

    def test_add_mul_broadcast_gradient(self):
        rng = np.random.default_rng(9)
        a, b = randt(rng, 4, 3), randt(rng, 3)
        check_gradients(lambda: ((a + b) * (a * b)).sum(), {"a": a, "b": b})

    def test_mean_gradient(self):
        rng = np.random.default_rng(10)
        x = randt(rng, 2, 6)
        check_gradients(lambda: (x * x).mean(), {"x": x})


class TestStructural:
    def test_reshape_transpose_gradient(self):
        rng = np.random.default_rng(11)
        x = randt(rng, 2, 6)
        w = Tensor(rng.normal(size=(3, 2, 2)))
        check_gradients(
            lambda: (x.reshape((2, 3, 2)).transpose((1, 0, 2)) * w).sum(), {"x": x})

    def test_concat_gradient(self):
        rng = np.random.default_rng(12)
        a, b = randt(rng, 2, 3), randt(rng, 4, 3)
        w = Tensor(rng.normal(size=(6, 3)))
        check_gradients(lambda: (ad.concat([a, b], axis=0) * w).sum(), {"a": a, "b": b})

    def test_embedding_gradient_scatter(self):
        rng = np.random.default_rng(13)
        table = randt(rng, 5, 3)
        ids = np.array([0, 2, 2, 4])
        w = Tensor(rng.normal(size=(4, 3)))
        check_gradients(lambda: (ad.embedding(table, ids) * w).sum(), {"table": table})
        # row 2 used twice: its gradient is the sum of both contributions
        table.zero_grad()
        ad.embedding(table, ids).sum().backward()
        assert np.allclose(table.grad[2], 2.0)
        assert np.allclose(table.grad[1], 0.0)

    def test_embedding_range_error(self):
        table = Tensor(np.zeros((4, 2)))
        with pytest.raises(IndexError):
            ad.embedding(table, np.array([4]))


class TestLosses:
    def test_cross_entropy_uniform_logits(self):
        logits = Tensor(np.zeros((3, 7)), requires_grad=True)
        loss = ad.cross_entropy(logits, np.array([0, 3, 6]))
        assert loss.item() == pytest.approx(np.log(7))

    def test_cross_entropy_confident_prediction(self):
        logits = np.full((2, 4), -1000.0)
        logits[0, 1] = logits[1, 2] = 1000.0
        loss = ad.cross_entropy(Tensor(logits), np.array([1, 2]), label_smoothing=0.0)
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_cross_entropy_gradient_with_smoothing(self):
        rng = np.random.default_rng(14)
        x = randt(rng, 4, 6)
        targets = np.array([1, 0, 5, 2])
        check_gradients(
            lambda: ad.cross_entropy(x, targets, label_smoothing=0.1), {"x": x})

    def test_soft_cross_entropy_matches_entropy_at_equality(self):
        rng = np.random.default_rng(15)
        logits = rng.normal(size=(3, 5))
        p = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
        loss = ad.soft_cross_entropy(Tensor(logits), p, reduction="sum")
        entropy = -(p * np.log(p)).sum()
        assert loss.item() == pytest.approx(entropy, abs=1e-9)

    def test_soft_cross_entropy_gradient(self):
        rng = np.random.default_rng(16)
        x = randt(rng, 3, 4)
        q = rng.random((3, 4))
        q /= q.sum(-1, keepdims=True)
        check_gradients(lambda: ad.soft_cross_entropy(x, q), {"x": x})

    def test_mse_gradient(self):
        rng = np.random.default_rng(17)
        a, b = randt(rng, 3, 3), Tensor(rng.normal(size=(3, 3)))
        check_gradients(lambda: ad.mse(a, b), {"a": a})


class TestConv2d:
    def test_forward_against_direct_sum(self):
        rng = np.random.default_rng(18)
        x = Tensor(rng.normal(size=(2, 5, 5)))
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        out = ad.conv2d(x, w, stride=1, padding=0)
        assert out.shape == (3, 3, 3)
        # direct evaluation at one output position
        expect = (x.data[:, 1:4, 2:5] * w.data[1]).sum()
        assert out.data[1, 1, 2] == pytest.approx(expect)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (2, 0)])
    def test_gradient(self, stride, padding):
        rng = np.random.default_rng(19)
        x = randt(rng, 2, 6, 6)
        w = randt(rng, 3, 2, 3, 3)
        b = randt(rng, 3)
        check_gradients(
            lambda: (lambda y: (y * y).sum())(ad.conv2d(x, w, b, stride=stride, padding=padding)),
            {"x": x, "w": w, "b": b})


class TestDropout:
    def test_eval_identity(self):
        x = Tensor(np.ones((4, 4)))
        assert ad.dropout(x, 0.5, seed=1, training=False) is x

    def test_same_seed_same_mask(self):
        x = Tensor(np.ones((32, 32)), requires_grad=True)
        a = ad.dropout(x, 0.5, seed=7, training=True)
        b = ad.dropout(x, 0.5, seed=7, training=True)
        assert np.array_equal(a.data, b.data)
        c = ad.dropout(x, 0.5, seed=8, training=True)
        assert not np.array_equal(a.data, c.data)

    def test_gradient_with_fixed_seed(self):
        rng = np.random.default_rng(20)
        x = randt(rng, 4, 4)
        check_gradients(
            lambda: (ad.dropout(x, 0.25, seed=3, training=True)
                     * ad.dropout(x, 0.25, seed=3, training=True)).sum(),
            {"x": x})


class TestStraightThrough:
    def test_forward_value_backward_surrogate(self):
        z_e = Tensor([1.0, 2.0], requires_grad=True)
        z_q = Tensor([1.5, 1.5])
        out = ad.straight_through(z_q, z_e)
        assert np.array_equal(out.data, z_q.data)
        (out * Tensor([3.0, 4.0])).sum().backward()
        assert np.allclose(z_e.grad, [3.0, 4.0])


def test_finite_difference_oracle_sanity():
    # the oracle itself must recover an analytic derivative
    arr = np.array([2.0])
    g = fd_gradient(lambda: float(arr[0] ** 3), arr)
    assert rel_err(g, np.array([12.0])) < 1e-6
