"""Autodiff engine: forward semantics, backward rules, SGD, numerics."""

import numpy as np
import pytest

from earloc import autodiff as ad
from earloc.autodiff import SGD, NumericsError, Tensor, finite_difference_check


def leaf(rng, shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


class TestTensorBasics:
    def test_requires_grad_propagates(self):
        a = Tensor(np.ones(3), requires_grad=True)
        b = Tensor(np.ones(3))
        c = ad.add(a, b)
        c_sum = ad.tsum(c)
        c_sum.backward()
        np.testing.assert_array_equal(a.grad, np.ones(3))
        assert b.grad is None

    def test_backward_accumulates_exactly_twice(self, rng):
        x = leaf(rng, (2, 3, 8, 8))
        w = leaf(rng, (4, 3, 3, 3), scale=0.2)
        b = leaf(rng, (4,), scale=0.1)

        def loss():
            return ad.tsum(ad.relu(ad.conv2d(x, w, b, padding=1)))

        loss().backward()
        once = {id(t): t.grad.copy() for t in (x, w, b)}
        loss().backward()
        for t in (x, w, b):
            np.testing.assert_allclose(t.grad, 2.0 * once[id(t)], rtol=0, atol=0)

    def test_interior_grads_not_retained(self, rng):
        x = leaf(rng, (1, 2, 4, 4))
        y = ad.relu(x)
        z = ad.tsum(y)
        z.backward()
        assert y.grad is None and x.grad is not None

    def test_fan_out_sums_both_paths(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = ad.add(x, x)  # dy/dx = 2
        ad.tsum(y).backward()
        np.testing.assert_array_equal(x.grad, [2.0])

    def test_forward_bit_determinism(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 16, 16)).astype(np.float32))
        w = Tensor(rng.normal(size=(5, 3, 3, 3)).astype(np.float32))
        b = Tensor(rng.normal(size=5).astype(np.float32))
        y1 = ad.conv2d(x, w, b, stride=2, padding=1).data
        y2 = ad.conv2d(x, w, b, stride=2, padding=1).data
        assert np.array_equal(y1, y2)


class TestConv:
    @pytest.mark.parametrize("kernel,stride,padding", [(3, 1, 1), (1, 1, 0), (3, 2, 1), (3, 1, 0)])
    def test_gemm_agrees_with_direct_loops(self, rng, kernel, stride, padding):
        x = Tensor(rng.normal(size=(2, 3, 10, 10)))
        w = Tensor(rng.normal(size=(4, 3, kernel, kernel)))
        b = Tensor(rng.normal(size=4))
        fast = ad.conv2d(x, w, b, stride=stride, padding=padding).data
        slow = ad.conv2d_direct(x.data, w.data, b.data, stride=stride, padding=padding)
        assert np.max(np.abs(fast - slow)) < 1e-12

    def test_identity_kernel(self):
        x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        y = ad.conv2d(x, Tensor(w), Tensor(np.zeros(1)), padding=1)
        np.testing.assert_array_equal(y.data, x.data)

    def test_hand_example(self):
        # 2x2 input, 3x3 sum kernel, padding 1: each output = sum of the
        # 2x2 neighbourhood present under the kernel
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        w = Tensor(np.ones((1, 1, 3, 3)))
        y = ad.conv2d(x, w, Tensor(np.zeros(1)), padding=1)
        np.testing.assert_array_equal(y.data[0, 0], [[10.0, 10.0], [10.0, 10.0]])

    def test_stride2_shape(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 10, 10)))
        y = ad.conv2d(x, Tensor(rng.normal(size=(3, 2, 3, 3))), Tensor(np.zeros(3)), stride=2, padding=1)
        assert y.data.shape == (1, 3, 5, 5)

    def test_rejects_bad_shapes(self, rng):
        x = Tensor(rng.normal(size=(1, 3, 8, 8)))
        with pytest.raises(ValueError):
            ad.conv2d(x, Tensor(rng.normal(size=(4, 2, 3, 3))), Tensor(np.zeros(4)))
        with pytest.raises(ValueError):
            ad.conv2d(x, Tensor(rng.normal(size=(4, 3, 5, 5))), Tensor(np.zeros(4)))
        with pytest.raises(ValueError):
            ad.conv2d(x, Tensor(rng.normal(size=(4, 3, 3, 3))), Tensor(np.zeros(4)), stride=3)

    def test_batch_rows_independent(self, rng):
        """Each sample's output depends only on that sample."""
        a = rng.normal(size=(1, 2, 6, 6))
        filler = rng.normal(size=(1, 2, 6, 6))
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        b = Tensor(rng.normal(size=3))
        alone = ad.conv2d(Tensor(a), w, b, padding=1).data
        stacked = ad.conv2d(Tensor(np.concatenate([a, filler])), w, b, padding=1).data
        np.testing.assert_array_equal(stacked[0], alone[0])


class TestMaxpool:
    def test_single_window(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert ad.maxpool2(x).data.item() == 4.0

    def test_constant_input(self):
        x = Tensor(np.full((1, 1, 4, 4), 7.0))
        np.testing.assert_array_equal(ad.maxpool2(x).data, np.full((1, 1, 2, 2), 7.0))

    def test_rejects_odd_dims(self):
        with pytest.raises(ValueError):
            ad.maxpool2(Tensor(np.zeros((1, 1, 3, 4))))

    def test_tie_routes_to_first_occurrence(self):
        x = Tensor(np.array([[[[5.0, 5.0], [5.0, 5.0]]]]), requires_grad=True)
        y = ad.maxpool2(x)
        ad.tsum(y).backward()
        np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])

    def test_gradient_goes_to_argmax(self):
        x = Tensor(np.array([[[[1.0, 9.0], [3.0, 4.0]]]]), requires_grad=True)
        ad.tsum(ad.maxpool2(x)).backward()
        np.testing.assert_array_equal(x.grad[0, 0], [[0.0, 1.0], [0.0, 0.0]])


class TestElementwiseAndShape:
    def test_softmax_of_zeros_is_half(self):
        y = ad.softmax(Tensor(np.zeros((3, 2))), axis=1)
        np.testing.assert_array_equal(y.data, np.full((3, 2), 0.5))

    def test_softmax_normalizes(self, rng):
        y = ad.softmax(Tensor(rng.normal(size=(10, 5))), axis=1)
        np.testing.assert_allclose(y.data.sum(axis=1), np.ones(10), atol=1e-6)

    def test_softmax_stable_for_large_logits(self):
        y = ad.softmax(Tensor(np.array([[1000.0, 1000.0]])), axis=1)
        np.testing.assert_allclose(y.data, [[0.5, 0.5]])

    def test_relu(self):
        x = Tensor(np.array([-2.0, 0.0, 3.0]))
        np.testing.assert_array_equal(ad.relu(x).data, [0.0, 0.0, 3.0])

    def test_sigmoid_symmetry(self):
        x = Tensor(np.array([-1.0, 0.0, 1.0]))
        y = ad.sigmoid(x).data
        assert y[1] == 0.5
        assert y[0] + y[2] == pytest.approx(1.0)

    def test_add_rejects_mismatched_shapes(self):
        with pytest.raises(ValueError):
            ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))

    def test_concat_channels(self, rng):
        a = Tensor(rng.normal(size=(1, 2, 4, 4)))
        b = Tensor(rng.normal(size=(1, 3, 4, 4)))
        y = ad.concat_channels([a, b])
        assert y.data.shape == (1, 5, 4, 4)
        np.testing.assert_array_equal(y.data[:, :2], a.data)
        np.testing.assert_array_equal(y.data[:, 2:], b.data)

    def test_linear(self, rng):
        x = Tensor(rng.normal(size=(4, 3)))
        w = Tensor(rng.normal(size=(2, 3)))
        b = Tensor(rng.normal(size=2))
        y = ad.linear(x, w, b)
        np.testing.assert_allclose(y.data, x.data @ w.data.T + b.data, atol=1e-12)

    def test_slice_axis_and_backward(self, rng):
        x = leaf(rng, (6, 3))
        y = ad.slice_axis(x, 0, 2, 5)
        np.testing.assert_array_equal(y.data, x.data[2:5])
        ad.tsum(y).backward()
        expected = np.zeros((6, 3))
        expected[2:5] = 1.0
        np.testing.assert_array_equal(x.grad, expected)

    def test_take_rows_duplicates_accumulate(self, rng):
        x = leaf(rng, (4, 2))
        y = ad.take_rows(x, np.array([1, 1, 3]))
        ad.tsum(y).backward()
        np.testing.assert_array_equal(x.grad, [[0, 0], [2, 2], [0, 0], [1, 1]])

    def test_reshape_moveaxis_round_trip(self, rng):
        x = leaf(rng, (2, 3, 4))
        y = ad.moveaxis(ad.reshape(x, (6, 4)), 0, 1)
        assert y.data.shape == (4, 6)
        ad.tsum(y).backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


class TestUpsample:
    def test_constant_stays_constant(self):
        x = Tensor(np.full((1, 2, 3, 3), 4.5))
        y = ad.bilinear_upsample2x(x)
        assert y.data.shape == (1, 2, 6, 6)
        np.testing.assert_allclose(y.data, 4.5)

    def test_one_pixel_replicates(self):
        x = Tensor(np.array([[[[3.0]]]]))
        np.testing.assert_allclose(ad.bilinear_upsample2x(x).data, np.full((1, 1, 2, 2), 3.0))

    def test_half_pixel_centers(self):
        # row [0, 1] upsampled: samples at x = -0.25, 0.25, 0.75, 1.25
        # (clamped) -> 0, 0.25, 0.75, 1
        x = Tensor(np.array([[[[0.0, 1.0]]]]))
        np.testing.assert_allclose(ad.bilinear_upsample2x(x).data[0, 0, 0], [0.0, 0.25, 0.75, 1.0])


class TestLossHelpers:
    def test_cross_entropy_uniform(self):
        # two equal logits -> p = 0.5 -> loss = ln 2 per row
        logits = Tensor(np.zeros((3, 2)))
        loss = ad.cross_entropy_logits(logits, np.array([0, 1, 1]), np.ones(3))
        assert loss.data == pytest.approx(3 * np.log(2.0))

    def test_cross_entropy_hand_value(self):
        logits = Tensor(np.array([[2.0, 0.0]]))
        # p(class 0) = e^2 / (e^2 + 1); loss = -ln p
        expected = -np.log(np.exp(2.0) / (np.exp(2.0) + 1.0))
        assert ad.cross_entropy_logits(logits, np.array([0]), np.ones(1)).data == pytest.approx(expected)

    def test_smooth_l1_piecewise(self):
        assert ad.smooth_l1(0.5) == pytest.approx(0.125)  # 0.5 * d^2 inside |d|<1
        assert ad.smooth_l1(1.0) == pytest.approx(0.5)  # boundary agrees from both sides
        assert ad.smooth_l1(2.5) == pytest.approx(2.0)  # |d| - 0.5 outside
        assert ad.smooth_l1(-2.5) == pytest.approx(2.0)

    def test_smooth_l1_sum_matches_scalar(self, rng):
        pred = leaf(rng, (5, 4))
        target = rng.normal(size=(5, 4))
        total = ad.smooth_l1_sum(pred, target, np.ones(5)).data
        expected = sum(ad.smooth_l1(d) for d in (pred.data - target).ravel())
        assert total == pytest.approx(expected, rel=1e-12)

    def test_loss_gradients_match_differences(self, rng):
        logits = leaf(rng, (6, 2))
        labels = np.array([0, 1, 1, 0, 1, 0])
        err = finite_difference_check(lambda: ad.cross_entropy_logits(logits, labels, np.ones(6)), [logits])
        assert err < 1e-6
        pred = leaf(rng, (6, 4))
        target = rng.normal(size=(6, 4)) * 2.0
        err = finite_difference_check(lambda: ad.smooth_l1_sum(pred, target, np.ones(6)), [pred])
        assert err < 1e-6


class TestSgd:
    def test_plain_step(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = SGD({"p": p}, lr=0.1, momentum=0.0, weight_decay=0.0)
        p.grad = np.array([2.0])  # f(p) = p^2 at p=1
        opt.step()
        np.testing.assert_allclose(p.data, [0.8])

    def test_momentum_recurrence_hand_unrolled(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = SGD({"p": p}, lr=0.1, momentum=0.9, weight_decay=0.0)
        # constant gradient 1.0 for two steps:
        # v1 = -0.1, p1 = 0.9 ; v2 = 0.9*(-0.1) - 0.1 = -0.19, p2 = 0.71
        p.grad = np.array([1.0])
        opt.step()
        np.testing.assert_allclose(p.data, [0.9])
        p.grad = np.array([1.0])
        opt.step()
        np.testing.assert_allclose(p.data, [0.71])

    def test_weight_decay_enters_gradient(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        opt = SGD({"p": p}, lr=0.1, momentum=0.0, weight_decay=0.5)
        p.grad = np.array([0.0])
        opt.step()
        # g_eff = 0 + 0.5*2 = 1 -> p = 2 - 0.1
        np.testing.assert_allclose(p.data, [1.9])

    def test_non_finite_gradient_aborts_without_update(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        q = Tensor(np.array([5.0]), requires_grad=True)
        opt = SGD({"p": p, "q": q}, lr=0.1, momentum=0.0, weight_decay=0.0)
        p.grad = np.array([np.nan])
        q.grad = np.array([1.0])
        with pytest.raises(NumericsError):
            opt.step()
        # neither parameter moved: validation happens before any update
        np.testing.assert_array_equal(p.data, [1.0])
        np.testing.assert_array_equal(q.data, [5.0])

    def test_zero_grad(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = SGD({"p": p}, lr=0.1)
        p.grad = np.array([3.0])
        opt.zero_grad()
        assert p.grad is None


class TestFiniteDifferenceHarness:
    def test_detects_a_broken_backward(self, rng, monkeypatch):
        """A deliberately wrong gradient must trip the checker."""
        x = leaf(rng, (3, 3))

        def build():
            y = ad.relu(x)
            out = ad.tsum(y)
            return out

        err_ok = finite_difference_check(build, [x])
        assert err_ok < 1e-6

        original = ad.relu

        def broken_relu(t):
            out = original(t)
            inner = out._backward

            def tampered(g, grads):
                inner(g * 1.05, grads)  # 5% gradient error

            out._backward = tampered
            return out

        monkeypatch.setattr(ad, "relu", broken_relu)
        err_bad = finite_difference_check(build, [x])
        assert err_bad > 1e-3
