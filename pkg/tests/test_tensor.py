import numpy as np
import pytest

from dams_vad.const import BN_EPSILON
from dams_vad.exceptions import DegenerateBatchError, DimensionError, GradCheckError
from dams_vad.tensor import (
    BatchNormState,
    Parameter,
    as_tensor,
    avg_pool1d,
    batch_norm1d,
    conv1d,
    global_avg_pool,
    global_max_pool,
    grad_check,
    linear,
    linear_backward,
    max_pool1d,
    relu,
    sigmoid,
    softmax,
    zero_grads,
)


class TestTensor:
    def test_rank_above_three_rejected(self):
        with pytest.raises(DimensionError):
            as_tensor(np.zeros((1, 1, 1, 1)))

    def test_parameter_grad_shape(self):
        param = Parameter("w", np.ones((2, 3)))
        assert param.grad.shape == param.value.shape
        with pytest.raises(DimensionError):
            param.accumulate(np.ones(3))

    def test_zero_grads(self):
        params = [Parameter("a", np.ones(3)), Parameter("b", np.ones((2, 2)))]
        for param in params:
            param.accumulate(np.full(param.value.shape, 2.0))
        zero_grads(params)
        assert all(not param.grad.any() for param in params)


class TestConv1d:
    def test_identity_kernel(self):
        x = np.array([[[1.0, 2.0, 3.0]]])
        out = conv1d(x, np.ones((1, 1, 1)), np.zeros(1))
        np.testing.assert_array_equal(out, x)

    def test_hand_summation(self):
        x = np.array([[[1.0, 2.0, 3.0, 4.0]]])
        out = conv1d(x, np.array([[[1.0, 1.0]]]), np.zeros(1))
        np.testing.assert_array_equal(out, [[[3.0, 5.0, 7.0]]])

    def test_cross_correlation_convention(self):
        x = np.array([[[1.0, 2.0, 3.0]]])
        out = conv1d(x, np.array([[[1.0, 0.0]]]), np.zeros(1))
        np.testing.assert_array_equal(out, [[[1.0, 2.0]]])

    @pytest.mark.parametrize("kernel", [1, 3, 5, 7])
    def test_odd_kernel_same_length(self, rng, kernel):
        x = rng.normal(size=(2, 3, 16))
        w = rng.normal(size=(4, 3, kernel))
        assert conv1d(x, w, np.zeros(4), padding=kernel // 2).shape == (2, 4, 16)

    def test_channel_mismatch(self, rng):
        with pytest.raises(DimensionError):
            conv1d(rng.normal(size=(1, 3, 8)), rng.normal(size=(2, 4, 1)), np.zeros(2))


class TestPooling:
    def test_avg_unit_kernel(self, rng):
        x = rng.normal(size=(2, 3, 9))
        np.testing.assert_array_equal(avg_pool1d(x, 1), x)

    def test_avg_edge_divisor_excludes_padding(self):
        out = avg_pool1d(np.array([[[2.0, 4.0, 6.0]]]), 3, padding=1)
        np.testing.assert_allclose(out, [[[3.0, 4.0, 5.0]]], atol=1e-15)

    def test_avg_preserves_length(self, rng):
        assert avg_pool1d(rng.normal(size=(1, 2, 27)), 3, padding=1).shape == (1, 2, 27)

    def test_avg_kernel_too_large(self):
        with pytest.raises(DimensionError):
            avg_pool1d(np.zeros((1, 1, 2)), 5)

    def test_max_hand_case(self):
        out, _ = max_pool1d(np.array([[[1.0, 5.0, 2.0]]]), 3, padding=1)
        np.testing.assert_array_equal(out, [[[5.0, 5.0, 5.0]]])

    def test_max_unit_kernel_and_constant(self, rng):
        x = rng.normal(size=(1, 2, 6))
        np.testing.assert_array_equal(max_pool1d(x, 1)[0], x)
        constant = np.full((1, 2, 6), 1.5)
        np.testing.assert_array_equal(max_pool1d(constant, 3, padding=1)[0], constant)

    def test_global_avg_matches_full_kernel(self, rng):
        x = rng.normal(size=(2, 3, 7))
        np.testing.assert_allclose(global_avg_pool(x), avg_pool1d(x, 7)[:, :, 0], atol=1e-15)
        np.testing.assert_array_equal(global_avg_pool(np.array([[[1.0, 2.0, 3.0]]])), [[2.0]])

    def test_global_pools_ignore_masked_frames(self):
        x = np.array([[[1.0, 3.0, 100.0]]])
        mask = np.array([[True, True, False]])
        np.testing.assert_array_equal(global_avg_pool(x, mask), [[2.0]])
        peak, argmax = global_max_pool(x, mask)
        np.testing.assert_array_equal(peak, [[3.0]])
        assert argmax[0, 0] == 1


class TestDense:
    def test_linear_hand_matmul(self):
        out = linear(np.array([1.0, 2.0]), np.array([[1.0, 1.0], [1.0, -1.0]]), np.zeros(2))
        np.testing.assert_array_equal(out, [3.0, -1.0])

    def test_linear_bias_broadcast(self):
        out = linear(np.ones((4, 3)), np.zeros((2, 3)), np.array([1.0, -2.0]))
        np.testing.assert_array_equal(out, np.tile([1.0, -2.0], (4, 1)))

    def test_softmax_closed_forms(self):
        np.testing.assert_allclose(softmax(np.zeros(4)), [0.25] * 4, atol=1e-15)
        np.testing.assert_allclose(softmax(np.array([0.0, np.log(3.0)])), [0.25, 0.75])

    def test_softmax_rows_and_shift(self, rng):
        x = rng.normal(size=(5, 7)) * 50
        out = softmax(x, axis=1)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(softmax(x + 123.0, axis=1), out, atol=1e-12)

    def test_sigmoid_and_relu(self, rng):
        assert sigmoid(np.array(0.0)) == 0.5
        x = rng.uniform(-30, 30, size=1000)
        np.testing.assert_allclose(sigmoid(-x), 1.0 - sigmoid(x), atol=1e-15)
        assert np.all((sigmoid(x) > 0) & (sigmoid(x) < 1))
        np.testing.assert_array_equal(relu(np.array([-1.0, 2.0])), [0.0, 2.0])


class TestBatchNorm:
    def test_train_statistics(self, rng):
        x = rng.normal(loc=3.0, scale=2.0, size=(4, 3, 10))
        state = BatchNormState.fresh(3)
        out, _ = batch_norm1d(x, np.ones(3), np.zeros(3), state, "train")
        variance = x.var(axis=(0, 2))
        np.testing.assert_allclose(out.mean(axis=(0, 2)), 0.0, atol=1e-10)
        np.testing.assert_allclose(
            out.var(axis=(0, 2)), variance / (variance + BN_EPSILON), atol=1e-10
        )
        np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(axis=(0, 2)))

    def test_eval_identity(self, rng):
        x = rng.normal(size=(2, 3, 5))
        out, _ = batch_norm1d(x, np.ones(3), np.zeros(3), BatchNormState.fresh(3), "eval")
        np.testing.assert_allclose(out, x / np.sqrt(1.0 + BN_EPSILON), atol=1e-15)
        np.testing.assert_allclose(out, x, atol=1e-5)

    def test_hand_case(self):
        out, _ = batch_norm1d(
            np.array([[[1.0, 3.0]]]), np.ones(1), np.zeros(1), BatchNormState.fresh(1), "train"
        )
        np.testing.assert_allclose(out, [[[-1.0, 1.0]]], atol=1e-5)

    def test_masked_frames_do_not_enter_statistics(self):
        x = np.array([[[1.0, 3.0, 1000.0]]])
        mask = np.array([[True, True, False]])
        out, _ = batch_norm1d(x, np.ones(1), np.zeros(1), BatchNormState.fresh(1), "train", mask)
        np.testing.assert_allclose(out[0, 0, :2], [-1.0, 1.0], atol=1e-5)

    def test_degenerate_batch(self):
        with pytest.raises(DegenerateBatchError):
            batch_norm1d(
                np.ones((1, 2, 1)), np.ones(2), np.zeros(2), BatchNormState.fresh(2), "train"
            )


class TestGradCheck:
    def test_linear_layer(self, rng):
        x = rng.uniform(-1, 1, size=(3, 3))
        w = Parameter("w", rng.uniform(-1, 1, size=(3, 3)))
        b = Parameter("b", rng.uniform(-1, 1, size=3))
        upstream = rng.normal(size=(3, 3))

        def run() -> float:
            zero_grads([w, b])
            out = linear(x, w.value, b.value)
            _, dw, db = linear_backward(upstream, x, w.value)
            w.accumulate(dw)
            b.accumulate(db)
            return float((out * upstream).sum())

        report = grad_check(run, [w, b])
        assert report.passed
        assert report.max_relative_error < 1e-6

    def test_constant_output(self):
        w = Parameter("w", np.ones(4))

        def run() -> float:
            w.zero_grad()
            return 1.0

        report = grad_check(run, [w])
        assert report.max_relative_error == 0.0

    def test_wrong_gradient_fails(self):
        w = Parameter("w", np.array([1.0, 2.0]))

        def run() -> float:
            w.zero_grad()
            w.accumulate(w.value)  # true gradient is 2w
            return float((w.value**2).sum())

        assert not grad_check(run, [w]).passed

    def test_non_finite_loss_aborts(self):
        w = Parameter("w", np.ones(1))
        with pytest.raises(GradCheckError):
            grad_check(lambda: float("nan"), [w])
