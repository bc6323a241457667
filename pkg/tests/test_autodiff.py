"""Unit tests for the autodiff engine.

Derived expected values are computed by independent oracles written here
(nested-loop reference convolution, closed-form statistics, direct
evaluation) and frozen into assertions.
"""

import copy
import math

import numpy as np
import pytest

import reldet.autodiff as ad
from reldet.autodiff import Optimizer, Tape, Tensor


def tape_grad(f, *tensors):
    with Tape() as tape:
        loss = f(*tensors)
        tape.backward(loss)
    return [t.grad for t in tensors]


# ---------------------------------------------------------------------------
# xavier initialization


class TestXavierInit:
    def test_bound_is_one_for_fan_three_three(self):
        t = ad.xavier_init((100,), 3, 3, seed=0)
        assert np.all(t.data >= -1.0) and np.all(t.data <= 1.0)

    def test_deterministic_per_seed(self):
        a = ad.xavier_init((4, 5), 7, 9, seed=42)
        b = ad.xavier_init((4, 5), 7, 9, seed=42)
        assert np.array_equal(a.data, b.data)
        c = ad.xavier_init((4, 5), 7, 9, seed=43)
        assert not np.array_equal(a.data, c.data)

    def test_sample_mean_matches_uniform_statistics(self):
        # Uniform on [-b, b]: sd = b/sqrt(3), so the mean of n samples lies
        # within 3*sd/sqrt(n) of zero with overwhelming probability.
        b = math.sqrt(6.0 / 100.0)
        t = ad.xavier_init((10000,), 50, 50, seed=1)
        assert abs(t.data.mean()) < 3.0 * (b / math.sqrt(3.0)) / math.sqrt(10000)

    def test_rejects_bad_extents_and_fans(self):
        with pytest.raises(ValueError):
            ad.xavier_init((0, 3), 1, 1, seed=0)
        with pytest.raises(ValueError):
            ad.xavier_init((-2,), 1, 1, seed=0)
        with pytest.raises(ValueError):
            ad.xavier_init((3,), 0, 1, seed=0)


# ---------------------------------------------------------------------------
# convolution


def reference_conv(x, k, b, stride=1, padding=0):
    """Nested-loop cross-correlation oracle, written before the fast path."""
    h, w, cin = x.shape
    ksize, _, _, cout = k.shape
    xp = np.zeros((h + 2 * padding, w + 2 * padding, cin))
    xp[padding:padding + h, padding:padding + w] = x
    ho = (h + 2 * padding - ksize) // stride + 1
    wo = (w + 2 * padding - ksize) // stride + 1
    y = np.zeros((ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            for co in range(cout):
                acc = b[co]
                for di in range(ksize):
                    for dj in range(ksize):
                        for c in range(cin):
                            acc += xp[i * stride + di, j * stride + dj, c] \
                                * k[di, dj, c, co]
                y[i, j, co] = acc
    return y


class TestConv2d:
    def test_one_by_one_identity_kernel(self):
        y = ad.conv2d(Tensor([[[5.0]]]), Tensor([[[[1.0]]]]), Tensor([0.0]))
        assert y.data.shape == (1, 1, 1)
        assert y.data[0, 0, 0] == 5.0

    def test_zero_kernels_zero_bias_give_zero(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(6, 7, 3)))
        y = ad.conv2d(x, Tensor(np.zeros((3, 3, 3, 4))), Tensor(np.zeros(4)),
                      padding=1)
        assert np.all(y.data == 0.0)

    def test_two_by_two_example_matches_reference(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
        k = np.array([[1.0, 0.0], [0.0, 1.0]]).reshape(2, 2, 1, 1)
        b = np.zeros(1)
        y = ad.conv2d(Tensor(x), Tensor(k), Tensor(b))
        assert y.data.shape == (1, 1, 1)
        assert y.data[0, 0, 0] == 5.0
        assert np.allclose(y.data, reference_conv(x, k, b))

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (3, 2)])
    def test_agrees_with_reference_oracle(self, stride, padding):
        rng = np.random.default_rng(stride * 10 + padding)
        x = rng.normal(size=(7, 9, 2))
        k = rng.normal(size=(3, 3, 2, 4))
        b = rng.normal(size=4)
        got = ad.conv2d(Tensor(x), Tensor(k), Tensor(b), stride, padding)
        want = reference_conv(x, k, b, stride, padding)
        assert got.data.shape == want.shape
        np.testing.assert_allclose(got.data, want, atol=1e-12)

    def test_output_extent_formula(self):
        x = Tensor(np.zeros((11, 8, 2)))
        y = ad.conv2d(x, Tensor(np.zeros((3, 3, 2, 1))), Tensor(np.zeros(1)),
                      stride=2, padding=1)
        assert y.data.shape == ((11 + 2 - 3) // 2 + 1, (8 + 2 - 3) // 2 + 1, 1)

    def test_batched_matches_per_sample(self):
        rng = np.random.default_rng(3)
        xs = rng.normal(size=(4, 6, 6, 2))
        k = Tensor(rng.normal(size=(3, 3, 2, 3)))
        b = Tensor(rng.normal(size=3))
        full = ad.conv2d(Tensor(xs), k, b, padding=1).data
        for i in range(4):
            single = ad.conv2d(Tensor(xs[i]), k, b, padding=1).data
            np.testing.assert_array_equal(full[i], single)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ad.conv2d(Tensor(np.zeros((4, 4, 2))),
                      Tensor(np.zeros((3, 3, 3, 1))), Tensor(np.zeros(1)))

    def test_identity_map_with_identity_kernels(self):
        # k=1, stride 1, kernels = identity matrix over channels.
        rng = np.random.default_rng(5)
        x = rng.normal(size=(5, 6, 3))
        k = np.eye(3).reshape(1, 1, 3, 3)
        y = ad.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(y.data, x)


# ---------------------------------------------------------------------------
# fully connected


class TestFullyConnected:
    def test_zero_input_gives_bias(self):
        y = ad.fully_connected(Tensor(np.zeros(3)),
                               Tensor(np.ones((3, 2))), Tensor([4.0, -1.0]))
        np.testing.assert_array_equal(y.data, [4.0, -1.0])

    def test_identity_weights(self):
        x = np.array([1.5, -2.0, 0.25])
        y = ad.fully_connected(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(y.data, x)

    def test_hand_matrix_product(self):
        y = ad.fully_connected(Tensor([1.0, 2.0]),
                               Tensor([[1.0, 0.0], [0.0, 3.0]]),
                               Tensor([1.0, 1.0]))
        np.testing.assert_array_equal(y.data, [2.0, 7.0])

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ad.fully_connected(Tensor(np.zeros(3)), Tensor(np.zeros((4, 2))),
                               Tensor(np.zeros(2)))


# ---------------------------------------------------------------------------
# elementwise


class TestElementwise:
    def test_relu_values(self):
        y = ad.relu(Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(y.data, [0.0, 0.0, 2.0])

    def test_relu_subgradient_at_zero_is_zero(self):
        (g,) = tape_grad(lambda x: ad.weighted_sum(ad.relu(x), np.ones(3)),
                         Tensor([-1.0, 0.0, 2.0], requires_grad=True))
        np.testing.assert_array_equal(g, [0.0, 0.0, 1.0])

    def test_sigmoid_at_zero(self):
        assert ad.sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_sigmoid_extreme_inputs_stay_finite(self):
        y = ad.sigmoid(Tensor([-1000.0, 1000.0]))
        assert np.all(np.isfinite(y.data))
        assert y.data[0] >= 0.0 and y.data[1] <= 1.0

    def test_ones_gate_is_identity(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(4, 5, 3))
        y = ad.scale_channels(Tensor(x), Tensor(np.ones(3)))
        np.testing.assert_array_equal(y.data, x)

    def test_non_broadcastable_shapes_rejected(self):
        with pytest.raises(ValueError):
            ad.scale_channels(Tensor(np.zeros((4, 5, 3))), Tensor(np.zeros(4)))
        with pytest.raises(ValueError):
            ad.scale_channels(Tensor(np.zeros((2, 4, 5, 3))), Tensor(np.zeros(3)))


# ---------------------------------------------------------------------------
# pooling


class TestMaxpool2:
    def test_constant_input(self):
        y = ad.maxpool2(Tensor(np.full((4, 6, 2), 3.25)))
        assert y.data.shape == (2, 3, 2)
        assert np.all(y.data == 3.25)

    def test_single_window(self):
        y = ad.maxpool2(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)))
        assert y.data.reshape(()) == 4.0

    def test_tie_routes_to_first_row_major(self):
        x = Tensor(np.array([[7.0, 7.0], [0.0, 0.0]]).reshape(2, 2, 1),
                   requires_grad=True)
        (g,) = tape_grad(lambda t: ad.weighted_sum(ad.maxpool2(t), np.ones((1, 1, 1))), x)
        np.testing.assert_array_equal(g.reshape(2, 2), [[1.0, 0.0], [0.0, 0.0]])

    def test_odd_extents_rejected(self):
        with pytest.raises(ValueError):
            ad.maxpool2(Tensor(np.zeros((3, 4, 1))))


class TestGlobalAvgPool:
    def test_constant_channel(self):
        y = ad.global_avg_pool(Tensor(np.full((3, 5, 2), -1.5)))
        np.testing.assert_array_equal(y.data, [-1.5, -1.5])

    def test_two_cell_mean(self):
        y = ad.global_avg_pool(Tensor(np.array([3.0, 5.0]).reshape(2, 1, 1)))
        assert y.data[0] == 4.0

    def test_gradient_is_uniform(self):
        x = Tensor(np.random.default_rng(0).normal(size=(4, 5, 2)),
                   requires_grad=True)
        (g,) = tape_grad(lambda t: ad.weighted_sum(ad.global_avg_pool(t), np.ones(2)), x)
        np.testing.assert_allclose(g, 1.0 / 20.0)


class TestConcatChannels:
    def test_concat_with_empty_is_identity(self):
        x = np.random.default_rng(0).normal(size=(3, 4, 2))
        y = ad.concat_channels(Tensor(x), Tensor(np.zeros((3, 4, 0))))
        np.testing.assert_array_equal(y.data, x)

    def test_channel_layout(self):
        a = np.random.default_rng(1).normal(size=(2, 2, 2))
        b = np.random.default_rng(2).normal(size=(2, 2, 3))
        y = ad.concat_channels(Tensor(a), Tensor(b)).data
        np.testing.assert_array_equal(y[..., :2], a)
        np.testing.assert_array_equal(y[..., 2:], b)

    def test_sum_loss_gradient_is_ones_on_both(self):
        a = Tensor(np.zeros((2, 2, 2)), requires_grad=True)
        b = Tensor(np.zeros((2, 2, 3)), requires_grad=True)
        ga, gb = tape_grad(
            lambda u, v: ad.weighted_sum(ad.concat_channels(u, v), np.ones((2, 2, 5))),
            a, b)
        np.testing.assert_array_equal(ga, np.ones((2, 2, 2)))
        np.testing.assert_array_equal(gb, np.ones((2, 2, 3)))

    def test_spatial_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ad.concat_channels(Tensor(np.zeros((2, 2, 1))),
                               Tensor(np.zeros((3, 2, 1))))


# ---------------------------------------------------------------------------
# dropout


class TestDropout:
    def test_eval_mode_is_identity(self):
        x = Tensor(np.random.default_rng(0).normal(size=(10,)))
        assert ad.dropout(x, 0.7, "eval", seed=1) is x

    def test_rate_zero_is_identity_in_both_modes(self):
        x = Tensor(np.random.default_rng(0).normal(size=(10,)))
        assert ad.dropout(x, 0.0, "train", seed=1) is x
        assert ad.dropout(x, 0.0, "eval", seed=1) is x

    def test_inverted_scaling_preserves_mean(self):
        # Each kept element is scaled by 2, so values are 0 or 2 with equal
        # probability: mean 1, variance 1, sample-mean sd = 1/sqrt(n).
        n = 100_000
        y = ad.dropout(Tensor(np.ones(n)), 0.5, "train", seed=9)
        assert abs(y.data.mean() - 1.0) < 3.0 * math.sqrt(1.0 / n)

    def test_deterministic_per_seed(self):
        x = Tensor(np.ones(1000))
        a = ad.dropout(x, 0.3, "train", seed=5).data
        b = ad.dropout(x, 0.3, "train", seed=5).data
        np.testing.assert_array_equal(a, b)

    def test_rate_one_rejected(self):
        with pytest.raises(ValueError):
            ad.dropout(Tensor(np.ones(3)), 1.0, "train", seed=0)


# ---------------------------------------------------------------------------
# loss


class TestSoftmaxCrossEntropy:
    def test_uniform_logits_give_log_p_exactly(self):
        for p in (2, 5, 6, 17):
            loss = ad.softmax_cross_entropy(Tensor(np.full(p, 3.7)), 0)
            assert loss.item() == math.log(p)

    def test_confident_correct_logit(self):
        loss = ad.softmax_cross_entropy(Tensor([100.0, 0.0]), 0)
        assert loss.item() < 1e-6

    def test_direct_evaluation_oracle(self):
        # -log softmax([1, 2])[0] = log(1 + e), evaluated directly.
        loss = ad.softmax_cross_entropy(Tensor([1.0, 2.0]), 0)
        assert abs(loss.item() - math.log(1.0 + math.e)) < 1e-12

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            z = rng.normal(size=6) * 10
            assert ad.softmax_cross_entropy(Tensor(z), 3).item() >= 0.0

    def test_extreme_logits_stay_finite(self):
        loss = ad.softmax_cross_entropy(Tensor([1e4, -1e4, 0.0]), 1)
        assert np.isfinite(loss.item())

    def test_gradient_is_softmax_minus_onehot(self):
        z = Tensor([1.0, 2.0, 0.5], requires_grad=True)
        (g,) = tape_grad(lambda t: ad.softmax_cross_entropy(t, 1), z)
        e = np.exp(z.data - z.data.max())
        want = e / e.sum()
        want[1] -= 1.0
        np.testing.assert_allclose(g, want, atol=1e-12)

    def test_out_of_range_label_rejected(self):
        with pytest.raises(ValueError):
            ad.softmax_cross_entropy(Tensor([0.0, 1.0]), 2)

    def test_batched_is_mean_of_per_sample(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(4, 5))
        labels = np.array([0, 3, 2, 1])
        batched = ad.softmax_cross_entropy(Tensor(z), labels).item()
        singles = [ad.softmax_cross_entropy(Tensor(z[i]), labels[i]).item()
                   for i in range(4)]
        assert abs(batched - np.mean(singles)) < 1e-12


# ---------------------------------------------------------------------------
# tape and backward


class TestTapeBackward:
    def test_every_requires_grad_tensor_gets_grad(self):
        x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        with Tape() as tape:
            h = ad.relu(x)
            loss = ad.weighted_sum(h, np.array([1.0, 1.0, 1.0]))
            tape.backward(loss)
        assert x.grad is not None
        assert h.grad is not None       # intermediate is populated too
        assert loss.grad is not None

    def test_reuse_of_tensor_accumulates(self):
        # The same tensor fed twice into one op collects both contributions.
        a = Tensor(np.ones((2, 2, 1)), requires_grad=True)
        with Tape() as tape:
            both = ad.concat_channels(a, a)
            loss = ad.weighted_sum(both, np.ones((2, 2, 2)))
            tape.backward(loss)
        np.testing.assert_array_equal(a.grad, np.full((2, 2, 1), 2.0))

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = ad.relu(x)
            with pytest.raises(ValueError):
                tape.backward(y)

    def test_nested_tape_rejected(self):
        with Tape():
            with pytest.raises(RuntimeError):
                Tape().__enter__()
        assert Tape._current is None

    def test_no_recording_outside_tape(self):
        tape = Tape()
        x = Tensor(np.ones(3), requires_grad=True)
        y = ad.relu(x)
        assert y.node_id is None
        assert not tape.nodes


# ---------------------------------------------------------------------------
# optimizer


class TestOptimizer:
    def test_zero_gradients_leave_params_unchanged(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        opt = Optimizer({"p": p}, lr=0.1)
        p.grad = np.zeros(2)
        before = p.data.copy()
        opt.step()
        np.testing.assert_array_equal(p.data, before)

    def test_missing_gradient_also_leaves_unchanged(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = Optimizer({"p": p}, lr=0.1)
        before = p.data.copy()
        opt.step()
        np.testing.assert_array_equal(p.data, before)

    def test_adaptive_step_moves_opposite_to_gradient_sign(self):
        for g in (0.3, -4.0):
            p = Tensor(np.array([1.0]), requires_grad=True)
            opt = Optimizer({"p": p}, lr=0.01)
            p.grad = np.array([g])
            opt.step()
            assert np.sign(p.data[0] - 1.0) == -np.sign(g)

    def test_step_counter_increments_by_one(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = Optimizer({"p": p}, lr=0.01)
        assert opt.step_count == 0
        opt.step()
        assert opt.step_count == 1
        opt.step()
        assert opt.step_count == 2

    def test_momentum_mode(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        opt = Optimizer({"p": p}, lr=0.1, mode="momentum", momentum=0.5)
        p.grad = np.array([1.0])
        opt.step()
        assert p.data[0] == pytest.approx(-0.1)
        p.grad = np.array([1.0])
        opt.step()  # velocity = 0.5 * 1 + 1 = 1.5
        assert p.data[0] == pytest.approx(-0.1 - 0.15)

    def test_adam_matches_textbook_formula(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        opt = Optimizer({"p": p}, lr=0.5)
        p.grad = np.array([3.0])
        opt.step()
        m = 0.1 * 3.0
        v = 0.001 * 9.0
        mhat = m / (1 - 0.9)
        vhat = v / (1 - 0.999)
        want = 2.0 - 0.5 * mhat / (math.sqrt(vhat) + 1e-8)
        assert p.data[0] == pytest.approx(want, rel=1e-12)


# ---------------------------------------------------------------------------
# finite differences


def _square_sum(t):
    # f(x) = sum(x^2) from existing ops: gate a 1x1xC map by its own flatten.
    gated = ad.scale_channels(t, ad.flatten_map(t))
    return ad.weighted_sum(gated, np.ones(t.data.shape))


class TestFiniteDifferenceCheck:
    def test_square_function_derivative_at_three(self):
        # f(x) = x^2 at x = 3: analytic gradient 6, central differences agree
        # to better than 1e-8 relative.
        x = np.array([[[3.0]]])
        err = ad.finite_difference_check(_square_sum, x)
        assert err < 1e-8
        with Tape() as tape:
            xt = Tensor(x, requires_grad=True)
            tape.backward(_square_sum(xt))
        assert xt.grad.reshape(()) == pytest.approx(6.0, abs=1e-12)

    def test_linear_function_is_exact_to_rounding(self):
        coeffs = np.array([2.0, -1.0, 0.5])
        err = ad.finite_difference_check(
            lambda t: ad.weighted_sum(t, coeffs), np.array([1.0, 2.0, 3.0]))
        assert err < 1e-10

    def test_known_closed_form_derivative(self):
        err = ad.finite_difference_check(
            lambda t: ad.weighted_sum(ad.sigmoid(t), np.ones(4)),
            np.array([0.3, -1.2, 2.0, 0.0]))
        assert err < 1e-8


# ---------------------------------------------------------------------------
# determinism and finiteness invariants


class TestInvariants:
    def test_forward_ops_finite_on_large_inputs(self):
        big = np.full((4, 4, 2), 1e3)
        assert np.all(np.isfinite(ad.relu(Tensor(big)).data))
        assert np.all(np.isfinite(ad.sigmoid(Tensor(-big)).data))
        assert np.all(np.isfinite(ad.maxpool2(Tensor(big)).data))
        assert np.isfinite(
            ad.softmax_cross_entropy(Tensor(np.array([1e300, -1e300, 0.0])), 0).item())

    def test_tensor_rejects_non_finite(self):
        with pytest.raises(ValueError):
            Tensor([np.inf])
        with pytest.raises(ValueError):
            Tensor([np.nan])
