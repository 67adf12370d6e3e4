"""Tests for numerics kernels, the optimizer and gradient verification"""

import math

import numpy as np
import pytest

from errors import DimensionError, LabelError, NonFiniteError, ScheduleError
from numerics import (
    LrSchedule, Parameter, ParameterSet, classification_loss, classification_loss_with_grad,
    clip_grad_norm, conv2d_same, conv2d_same_backward, finite_diff_check, matmul, sgd_step,
    sigmoid, smooth_l1, smooth_l1_backward, softmax_rows, softmax_rows_backward,
)


def brute_conv(frame, kernel):
    h, w = frame.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            for di in range(3):
                for dj in range(3):
                    y, x = i + di - 1, j + dj - 1
                    if 0 <= y < h and 0 <= x < w:
                        out[i, j] += kernel[di, dj] * frame[y, x]
    return out


class TestPrimitives:
    def test_matmul_shape_mismatch(self):
        with pytest.raises(DimensionError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_matmul_values(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        np.testing.assert_allclose(matmul(a, b), a @ b)

    def test_sigmoid_extremes_are_finite(self):
        out = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0])
        assert np.all(np.isfinite(out))

    def test_softmax_rows_sum_to_one(self, rng):
        x = rng.normal(size=(5, 4)) * 50
        s = softmax_rows(x)
        np.testing.assert_allclose(s.sum(axis=1), np.ones(5))
        assert np.all(s > 0)

    def test_softmax_needs_a_column(self):
        with pytest.raises(DimensionError):
            softmax_rows(np.zeros((2, 0)))

    def test_softmax_backward_matches_finite_differences(self, rng):
        x = rng.normal(size=(3, 4))
        dout = rng.normal(size=(3, 4))
        analytic = softmax_rows_backward(softmax_rows(x), dout)
        numeric = np.zeros_like(x)
        eps = 1e-6
        for idx in np.ndindex(x.shape):
            up, down = x.copy(), x.copy()
            up[idx] += eps
            down[idx] -= eps
            numeric[idx] = np.sum((softmax_rows(up) - softmax_rows(down)) * dout) / (2 * eps)
        np.testing.assert_allclose(analytic, numeric, atol=1e-7)

    def test_conv2d_same_matches_brute_force(self, rng):
        frame, kernel = rng.normal(size=(5, 6)), rng.normal(size=(3, 3))
        np.testing.assert_allclose(conv2d_same(frame, kernel), brute_conv(frame, kernel))

    def test_conv2d_same_rejects_non_3x3_kernel(self):
        with pytest.raises(DimensionError):
            conv2d_same(np.ones((4, 4)), np.ones((5, 5)))

    def test_conv2d_backward_matches_finite_differences(self, rng):
        frame, kernel = rng.normal(size=(4, 5)), rng.normal(size=(3, 3))
        dout = rng.normal(size=(4, 5))
        dframe, dkernel = conv2d_same_backward(frame, kernel, dout)
        eps = 1e-6
        for idx in [(0, 0), (1, 2), (2, 1)]:
            up, down = kernel.copy(), kernel.copy()
            up[idx] += eps
            down[idx] -= eps
            numeric = np.sum((conv2d_same(frame, up) - conv2d_same(frame, down)) * dout) / (2 * eps)
            assert dkernel[idx] == pytest.approx(numeric, abs=1e-6)
        for idx in [(0, 0), (3, 4), (2, 2)]:
            up, down = frame.copy(), frame.copy()
            up[idx] += eps
            down[idx] -= eps
            numeric = np.sum((conv2d_same(up, kernel) - conv2d_same(down, kernel)) * dout) / (2 * eps)
            assert dframe[idx] == pytest.approx(numeric, abs=1e-6)

    def test_smooth_l1_regions(self):
        assert smooth_l1(np.array([0.5]), np.array([0.0])) == pytest.approx(0.125)
        assert smooth_l1(np.array([3.0]), np.array([0.0])) == pytest.approx(2.5)
        np.testing.assert_allclose(smooth_l1_backward(np.array([0.5, -3.0]), np.zeros(2)), [0.5, -1.0])

    def test_smooth_l1_shape_mismatch(self):
        with pytest.raises(DimensionError):
            smooth_l1(np.zeros(3), np.zeros(4))


class TestClassificationLoss:
    def test_uniform_logits_give_log_k(self):
        assert classification_loss(np.zeros((4, 3)), [0, 1, 2, 0]) == pytest.approx(math.log(3))

    def test_empty_batch_is_zero(self):
        loss, grad = classification_loss_with_grad(np.zeros((0, 3)), [])
        assert loss == 0.0
        assert grad.shape == (0, 3)

    def test_label_out_of_range(self):
        with pytest.raises(LabelError):
            classification_loss(np.zeros((2, 3)), [0, 3])

    def test_label_count_mismatch(self):
        with pytest.raises(DimensionError):
            classification_loss(np.zeros((2, 3)), [0])

    def test_single_label_gradient_rows_sum_to_zero(self, rng):
        _, grad = classification_loss_with_grad(rng.normal(size=(4, 3)), [0, 1, 2, 1])
        np.testing.assert_allclose(grad.sum(axis=1), np.zeros(4), atol=1e-12)

    def test_multi_label_matches_closed_form(self):
        logits = np.array([[0.0, 2.0]])
        targets = np.array([[1.0, 0.0]])
        expected = (math.log(2.0) + math.log1p(math.exp(2.0))) / 2
        assert classification_loss(logits, targets, multi_label=True) == pytest.approx(expected)

    def test_multi_label_rejects_non_binary_targets(self):
        with pytest.raises(LabelError):
            classification_loss(np.zeros((1, 2)), np.array([[0.5, 0.0]]), multi_label=True)

    @pytest.mark.parametrize("multi_label", [False, True])
    def test_gradient_check(self, rng, multi_label):
        params = ParameterSet()
        logits = params.add("logits", rng.normal(size=(3, 4)))
        labels = (rng.random((3, 4)) > 0.5).astype(float) if multi_label else [1, 3, 0]

        def objective(with_grad):
            loss, grad = classification_loss_with_grad(logits.value, labels, multi_label)
            if with_grad:
                params.zero_grad()
                logits.accumulate(grad)
            return loss

        assert finite_diff_check(objective, params, eps=1e-6) < 1e-5


class TestSchedule:
    def test_warmup_endpoints(self):
        s = LrSchedule(base_lr=0.001, warmup_start_lr=0.0001, warmup_epochs=0.3, total_epochs=10)
        assert s.lr(0.0) == pytest.approx(0.0001)
        assert s.lr(0.15) == pytest.approx(0.00055)
        assert s.lr(0.3) == pytest.approx(0.001)

    def test_cosine_decay(self):
        s = LrSchedule(base_lr=0.001, warmup_start_lr=0.0001, warmup_epochs=0.3, total_epochs=10)
        assert s.lr(10.0) == pytest.approx(0.0, abs=1e-15)
        assert s.lr(0.3 + 9.7 / 2) == pytest.approx(0.0005)
        assert s.lr(25.0) == pytest.approx(0.0, abs=1e-15)

    def test_negative_progress(self):
        with pytest.raises(ScheduleError):
            LrSchedule().lr(-0.1)

    def test_bad_construction(self):
        with pytest.raises(ScheduleError):
            LrSchedule(warmup_epochs=20, total_epochs=10)


class TestOptimizer:
    def test_sgd_step_with_momentum_and_decay(self):
        p = Parameter(np.array([1.0]))
        p.gradient[:] = 0.5
        schedule = LrSchedule(base_lr=0.1, warmup_start_lr=0.1, warmup_epochs=0.0, total_epochs=1)
        lr = sgd_step([p], schedule, 0.0, momentum=0.9, weight_decay=0.1)
        assert lr == pytest.approx(0.1)
        assert p.value[0] == pytest.approx(1.0 - 0.1 * 0.6)
        sgd_step([p], schedule, 0.0, momentum=0.9, weight_decay=0.1)
        assert p.momentum_buffer[0] == pytest.approx(0.9 * 0.6 + 0.5 + 0.1 * 0.94)
        assert p.value[0] == pytest.approx(0.94 - 0.1 * 1.134)

    def test_sgd_rejects_non_finite_gradient(self):
        p = Parameter(np.zeros(2))
        p.gradient[0] = np.nan
        with pytest.raises(NonFiniteError):
            sgd_step([p], LrSchedule(), 0.5)

    def test_clip_grad_norm(self):
        params = ParameterSet()
        params.add("a", np.zeros(2)).gradient[:] = [3.0, 4.0]
        assert clip_grad_norm(params, 1.0) == pytest.approx(5.0)
        np.testing.assert_allclose(params["a"].gradient, [0.6, 0.8])

    def test_clip_grad_norm_disabled(self):
        params = ParameterSet()
        params.add("a", np.zeros(2)).gradient[:] = [3.0, 4.0]
        clip_grad_norm(params, None)
        np.testing.assert_allclose(params["a"].gradient, [3.0, 4.0])


class TestParameterSet:
    def test_registry(self):
        params = ParameterSet()
        params.add("stage.a", np.zeros((2, 3)))
        params.add("other.b", np.ones(4))
        assert list(params) == ["stage.a", "other.b"]
        assert params.num_values() == 10
        assert list(params.subset("stage.")) == ["stage.a"]

    def test_duplicate_name(self):
        params = ParameterSet()
        params.add("a", np.zeros(1))
        with pytest.raises(DimensionError):
            params.add("a", np.zeros(1))

    def test_accumulate_shape(self):
        with pytest.raises(DimensionError):
            Parameter(np.zeros(3)).accumulate(np.zeros(2))


class TestFiniteDiffCheck:
    def test_detects_wrong_gradient(self):
        params = ParameterSet()
        x = params.add("x", np.array([1.0, 2.0]))

        def objective(with_grad):
            if with_grad:
                params.zero_grad()
                x.accumulate(3.0 * x.value)  # true gradient is 2x
            return float(np.sum(x.value ** 2))

        assert finite_diff_check(objective, params) > 0.1

    def test_rejects_non_finite_objective(self):
        params = ParameterSet()
        params.add("x", np.zeros(1))
        with pytest.raises(NonFiniteError):
            finite_diff_check(lambda with_grad: float("nan"), params)
