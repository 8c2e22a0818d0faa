"""
Tests for the autograd engine
=============================

Forward values, backward rules (checked against central finite differences),
tape bookkeeping and the tensor blob format.
"""

import struct

import numpy as np
import pytest

from conformer_nas.autograd import (
    Tensor,
    backward,
    batch_norm,
    concat,
    current_tape,
    depthwise_conv1d,
    dropout,
    glu,
    layer_norm,
    linear,
    log_softmax,
    matmul,
    no_grad,
    receptive_field,
    relu,
    sigmoid,
    softmax,
    swish,
)
from conformer_nas.autograd.serialization import (
    decode_tensor,
    encode_tensor,
    load_tensors,
    save_tensors,
)
from conformer_nas.core.exceptions import ArtifactError, DimensionError

from .gradcheck import gradcheck, relative_error

TRIALS = 20


class TestTape:

    def test_fan_out_gradients_are_summed(self):
        x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        y = (x * x + x).sum()
        backward(y)
        np.testing.assert_allclose(x.grad, 2 * x.data + 1)

    def test_backward_resets_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        backward((x * 2.0).sum())
        assert len(current_tape()) == 0

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(DimensionError):
            backward(x * 2.0)

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = (x * 3.0).sum()
        assert len(current_tape()) == 0
        assert not y.requires_grad

    def test_constants_receive_no_gradient(self):
        x = Tensor(np.ones(2), requires_grad=True)
        c = Tensor(np.full(2, 5.0))
        backward((x * c).sum())
        assert c.grad is None
        np.testing.assert_allclose(x.grad, [5.0, 5.0])

    def test_intermediate_gradient_is_exposed(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        h = x * 3.0
        backward((h * h).sum())
        np.testing.assert_allclose(h.grad, [12.0])
        np.testing.assert_allclose(x.grad, [36.0])

    def test_broadcast_gradient_is_reduced(self):
        x = Tensor(np.ones((4, 3)), requires_grad=True)
        b = Tensor(np.zeros(3), requires_grad=True)
        backward((x + b).sum())
        np.testing.assert_allclose(b.grad, [4.0, 4.0, 4.0])


class TestMatmul:

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError) as info:
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
        assert "(2, 3)" in str(info.value) and "(4, 5)" in str(info.value)

    def test_identity(self, rng):
        a = rng.standard_normal((3, 4))
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(np.eye(4))).data, a)

    def test_small_product(self):
        out = matmul(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])), Tensor(np.array([[1.0], [1.0]])))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_square_sum_gradient(self, rng):
        x = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
        backward((x * x).sum())
        np.testing.assert_allclose(x.grad, 2.0 * x.data)

    def test_gradients(self, rng):
        for _ in range(TRIALS):
            a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
            assert gradcheck(lambda x, y: (matmul(x, y) * matmul(x, y)).sum(), [a, b]) < 1e-4

    def test_batched_gradients(self, rng):
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 3))
        assert gradcheck(lambda x, y: (x @ y).exp().sum(), [a, b]) < 1e-4

    def test_linear_gradients(self, rng):
        x, w, bias = rng.standard_normal((5, 3)), rng.standard_normal((3, 2)), rng.standard_normal(2)
        assert gradcheck(lambda x, w, b: (linear(x, w, b) ** 2).sum(), [x, w, bias]) < 1e-4


class TestElementwise:

    @pytest.mark.parametrize("op", [sigmoid, swish, lambda t: t.exp(), lambda t: (t * t + 1.0).log()])
    def test_gradients(self, rng, op):
        for _ in range(TRIALS):
            x = rng.standard_normal((3, 4))
            assert gradcheck(lambda t: (op(t) * op(t)).sum(), [x]) < 1e-4

    def test_relu_gradient_away_from_kink(self, rng):
        x = rng.standard_normal((4, 4))
        x[np.abs(x) < 1e-2] = 0.5
        assert gradcheck(lambda t: (relu(t) * t).sum(), [x]) < 1e-4

    def test_glu_halves_axis(self, rng):
        x = rng.standard_normal((3, 8))
        assert glu(Tensor(x)).shape == (3, 4)
        assert gradcheck(lambda t: (glu(t) ** 2).sum(), [x]) < 1e-4

    def test_glu_rejects_odd_axis(self):
        with pytest.raises(DimensionError):
            glu(Tensor(np.ones((2, 3))))

    def test_sigmoid_is_stable_for_large_inputs(self):
        out = sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0]))).data
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0])


class TestReductionsAndIndexing:

    def test_mean_reshape_transpose(self, rng):
        x = rng.standard_normal((2, 3, 4))
        assert gradcheck(lambda t: (t.reshape(6, 4).transpose(1, 0) ** 2).mean(), [x]) < 1e-4

    def test_getitem_scatter(self, rng):
        x = rng.standard_normal((5, 3))
        rows = np.array([0, 2, 2, 4])
        assert gradcheck(lambda t: (t[rows] ** 2).sum(), [x]) < 1e-4

    def test_concat(self, rng):
        a, b = rng.standard_normal((2, 3)), rng.standard_normal((4, 3))
        out = concat([Tensor(a), Tensor(b)])
        assert out.shape == (6, 3)
        assert gradcheck(lambda x, y: (concat([x, y]) ** 3).sum(), [a, b]) < 1e-4


class TestSoftmax:

    def test_two_to_one(self):
        out = softmax(Tensor(np.array([np.log(2.0), 0.0]))).data
        np.testing.assert_allclose(out, [2.0 / 3.0, 1.0 / 3.0], rtol=1e-12)

    def test_shift_invariance(self, rng):
        x = rng.standard_normal((4, 6))
        np.testing.assert_allclose(softmax(Tensor(x + 37.5)).data, softmax(Tensor(x)).data, rtol=1e-12)
        np.testing.assert_allclose(log_softmax(Tensor(x - 12.0)).data, log_softmax(Tensor(x)).data, atol=1e-12)

    def test_rows_sum_to_one(self, rng):
        out = softmax(Tensor(rng.standard_normal((5, 7))), axis=-1).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)

    def test_log_softmax_is_stable(self):
        out = log_softmax(Tensor(np.array([[1000.0, 0.0], [-1000.0, -1000.0]]))).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out[1], [np.log(0.5)] * 2)

    def test_bad_axis(self):
        with pytest.raises(DimensionError):
            softmax(Tensor(np.ones((2, 2))), axis=2)

    def test_gradients(self, rng):
        weights = rng.standard_normal((3, 5))
        for _ in range(TRIALS):
            x = rng.standard_normal((3, 5))
            assert gradcheck(lambda t: (softmax(t) * weights).sum(), [x]) < 1e-4
            assert gradcheck(lambda t: (log_softmax(t) * weights).sum(), [x]) < 1e-4


class TestNormalization:

    def test_layer_norm_two_values(self):
        out = layer_norm(Tensor(np.array([[1.0, 3.0]])), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
        np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-9)

    def test_layer_norm_constant_frame_is_zero(self):
        out = layer_norm(Tensor(np.full((2, 5), 4.0)), Tensor(np.ones(5)), Tensor(np.zeros(5))).data
        np.testing.assert_array_equal(out, np.zeros((2, 5)))

    def test_layer_norm_gradients(self, rng):
        for _ in range(TRIALS):
            x, g, b = rng.standard_normal((4, 6)), rng.standard_normal(6), rng.standard_normal(6)
            w = rng.standard_normal((4, 6))
            assert gradcheck(lambda x, g, b: (layer_norm(x, g, b) * w).sum(), [x, g, b]) < 1e-4

    def test_batch_norm_normalizes_columns(self, rng):
        x = rng.standard_normal((50, 3)) * 4.0 + 2.0
        out = batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
        np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.std(axis=0), 1.0, atol=1e-4)

    def test_batch_norm_updates_running_statistics(self, rng):
        x = rng.standard_normal((20, 2)) + 5.0
        mean, var = np.zeros(2), np.ones(2)
        batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), mean, var, train_mode=True)
        np.testing.assert_allclose(mean, 0.1 * x.mean(axis=0))
        np.testing.assert_allclose(var, 0.9 + 0.1 * x.var(axis=0, ddof=1))

    def test_batch_norm_eval_uses_running_statistics(self):
        x = np.array([[3.0], [5.0]])
        out = batch_norm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)),
                         np.array([1.0]), np.array([4.0]), train_mode=False, eps=0.0).data
        np.testing.assert_allclose(out, [[1.0], [2.0]])

    def test_batch_norm_gradients(self, rng):
        for _ in range(TRIALS):
            x, g, b = rng.standard_normal((6, 3)), rng.standard_normal(3), rng.standard_normal(3)
            w = rng.standard_normal((6, 3))
            assert gradcheck(lambda x, g, b: (batch_norm(x, g, b) * w).sum(), [x, g, b]) < 1e-4


class TestDepthwiseConv:

    def test_same_padding_example(self):
        x = Tensor(np.arange(1.0, 6.0).reshape(5, 1))
        out = depthwise_conv1d(x, Tensor(np.ones((3, 1))))
        np.testing.assert_allclose(out.data[:, 0], [3.0, 6.0, 9.0, 12.0, 9.0])

    def test_dilation_keeps_length(self, rng):
        out = depthwise_conv1d(Tensor(rng.standard_normal((9, 2))), Tensor(rng.standard_normal((3, 2))), dilation=2)
        assert out.shape == (9, 2)

    def test_even_kernel_rejected(self):
        with pytest.raises(DimensionError):
            depthwise_conv1d(Tensor(np.ones((5, 1))), Tensor(np.ones((2, 1))))

    def test_receptive_field(self):
        assert receptive_field(15, 2) == 29
        assert receptive_field(7, 1) == 7

    @pytest.mark.parametrize("dilation", [1, 2])
    def test_gradients(self, rng, dilation):
        for _ in range(TRIALS):
            x, k = rng.standard_normal((8, 3)), rng.standard_normal((3, 3))
            w = rng.standard_normal((8, 3))
            assert gradcheck(lambda x, k: (depthwise_conv1d(x, k, dilation) * w).sum(), [x, k]) < 1e-4


class TestComposite:

    def test_matmul_softmax_layer_norm_gradients(self, rng):
        for _ in range(TRIALS):
            x, w = rng.standard_normal((4, 3)), rng.standard_normal((3, 5))
            g, b = rng.standard_normal(5), rng.standard_normal(5)
            m = rng.standard_normal((4, 5))

            def loss(x, w, g, b):
                return (layer_norm(softmax(x @ w), g, b) * m).sum()

            assert gradcheck(loss, [x, w, g, b]) < 1e-4


class TestDropout:

    def test_eval_mode_is_identity(self, rng):
        x = Tensor(rng.standard_normal((5, 4)))
        assert dropout(x, 0.5, rng, train_mode=False) is x
        assert dropout(x, 0.0, rng, train_mode=True) is x

    def test_train_mode_scales_survivors(self, rng):
        x = rng.standard_normal((200, 10))
        out = dropout(Tensor(x), 0.25, np.random.default_rng(0), train_mode=True).data
        kept = out != 0.0
        np.testing.assert_allclose(out[kept], x[kept] / 0.75)
        assert abs(kept.mean() - 0.75) < 0.04

    def test_train_mode_needs_generator(self):
        with pytest.raises(ValueError):
            dropout(Tensor(np.ones(3)), 0.5, None, train_mode=True)


class TestGradcheckHelper:

    def test_round_off_on_zero_gradients_passes(self):
        assert relative_error(np.array([4.4e-16, 0.0]), np.array([5.6e-11, -3.0e-11])) == 0.0

    def test_real_mismatch_is_reported(self):
        assert relative_error(np.ones(3), np.zeros(3)) == pytest.approx(1.0)
        assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.1])) > 1e-3


class TestSerialization:

    def test_record_layout(self):
        payload = encode_tensor(np.array([[1.0, 2.0, 3.0]]))
        assert struct.unpack_from("<I", payload, 0) == (2,)
        assert struct.unpack_from("<QQ", payload, 4) == (1, 3)
        assert struct.unpack_from("<3d", payload, 20) == (1.0, 2.0, 3.0)

    def test_scalar_record(self):
        array, end = decode_tensor(encode_tensor(np.array(7.5)))
        assert array.shape == () and float(array) == 7.5
        assert end == 4 + 8

    def test_scalar_survives_index(self, tmp_path):
        save_tensors({"step_size": np.array(0.25), "row": np.ones(2)}, tmp_path / "t.bin", tmp_path / "t.json")
        loaded, _ = load_tensors(tmp_path / "t.json")
        assert loaded["step_size"].shape == () and float(loaded["step_size"]) == 0.25
        assert loaded["row"].shape == (2,)

    def test_truncated_record(self):
        payload = encode_tensor(np.ones(4))[:-3]
        with pytest.raises(ArtifactError):
            decode_tensor(payload)

    def test_save_and_load_with_index(self, tmp_path, rng):
        tensors = {"a": rng.standard_normal((2, 3)), "b.c": rng.standard_normal(5)}
        save_tensors(tensors, tmp_path / "t.bin", tmp_path / "t.json", extra={"step": 4})
        loaded, extra = load_tensors(tmp_path / "t.json")
        assert extra == {"step": 4}
        for name, array in tensors.items():
            np.testing.assert_array_equal(loaded[name], array)

    def test_missing_blob(self, tmp_path):
        save_tensors({"a": np.ones(2)}, tmp_path / "t.bin", tmp_path / "t.json")
        (tmp_path / "t.bin").unlink()
        with pytest.raises(ArtifactError):
            load_tensors(tmp_path / "t.json")
