"""Candidate operations: shapes, parameter counts, packed batches and gradients."""

import numpy as np
import pytest

from conformer_nas.autograd import Tensor, no_grad
from conformer_nas.core.exceptions import DimensionError, GenotypeError
from conformer_nas.models.module import Initializer
from conformer_nas.models.ops import (
    DropoutContext,
    SlotNorm,
    attention_weights,
    build_candidate,
    conv_module_forward,
    embed_input,
    ffn_forward,
    mhsa_forward,
    segments,
    slot_params,
)
from conformer_nas.schemas.genotype import CandidateOpSpec, Slot, parse_candidate

from .gradcheck import gradcheck

TRIALS = 20


def _op(name, d_model=8, seed=0, dropout=0.0):
    spec = parse_candidate(name)
    init = Initializer(seed).child(name)
    return build_candidate(spec, d_model, init, DropoutContext(dropout, seed)), SlotNorm(d_model, init.child("norm"))


def _randomize(params, rng):
    for value in params.values():
        value.data[...] = rng.standard_normal(value.shape) * 0.5


class TestCandidateNames:

    def test_exact_names_parse(self):
        spec = CandidateOpSpec.from_name("dil_conv_11")
        assert (spec.module_slot, spec.kernel, spec.dilation) == (Slot.CONV, 11, 2)
        assert CandidateOpSpec.from_name("mhsa_head8").heads == 8
        assert CandidateOpSpec.from_name("ffn_512").hidden_dim == 512

    def test_unknown_name_lists_valid_names(self):
        with pytest.raises(GenotypeError) as info:
            parse_candidate("conv_9")
        assert "conv_15" in str(info.value)
        assert "mhsa_head4" in info.value.valid_names

    def test_wrong_slot(self):
        with pytest.raises(GenotypeError):
            parse_candidate("ffn_256", Slot.CONV)

    def test_receptive_fields(self):
        assert parse_candidate("dil_conv_15").receptive_field == 29
        assert parse_candidate("conv_7").receptive_field == 7
        assert parse_candidate("identity").receptive_field == 1


class TestIdentity:

    def test_returns_input_exactly(self, rng):
        op, _ = _op("identity")
        x = Tensor(rng.standard_normal((5, 8)))
        assert op(x, None) is x
        assert op.parameter_count() == 0


class TestFeedForward:

    def test_parameter_count_at_full_width(self):
        op, _ = _op("ffn_1024", d_model=256)
        assert op.parameter_count() == 525568

    def test_output_shape(self, rng):
        op, norm = _op("ffn_256")
        x = Tensor(rng.standard_normal((6, 8)))
        assert op(x, norm(x)).shape == (6, 8)

    def test_hidden_width_checked(self, rng):
        op, norm = _op("ffn_256")
        params = slot_params(norm, op)
        with pytest.raises(DimensionError):
            ffn_forward(Tensor(rng.standard_normal((3, 8))), params, 512, train_mode=False)

    def test_gradients(self, rng):
        shapes = {"norm_gain": (4,), "norm_bias": (4,), "w1": (4, 6), "b1": (6,), "w2": (6, 4), "b2": (4,)}
        names = list(shapes)
        for _ in range(TRIALS):
            x, w = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))

            def loss(x, *values):
                return (ffn_forward(x, dict(zip(names, values)), 6, train_mode=False) * w).sum()

            values = [rng.standard_normal(shape) * 0.5 for shape in shapes.values()]
            assert gradcheck(loss, [x] + values) < 1e-4


class TestMultiHeadSelfAttention:

    @pytest.mark.parametrize("heads", [3, 5])
    def test_heads_must_divide_width(self, heads):
        spec = CandidateOpSpec(module_slot=Slot.MHSA, name="mhsa_head4", heads=heads)
        with pytest.raises(DimensionError):
            build_candidate(spec, 8, Initializer(0), DropoutContext(0.0, 0))

    def test_zeroed_queries_and_keys_attend_uniformly(self, rng):
        op, norm = _op("mhsa_head4")
        for name in ("q_weight", "q_bias", "k_weight", "k_bias"):
            getattr(op, name).data[...] = 0.0
        x = Tensor(rng.standard_normal((7, 8)))
        (weights,) = attention_weights(x, slot_params(norm, op), 4)
        np.testing.assert_allclose(weights, np.full((4, 7, 7), 1.0 / 7.0), atol=1e-12)

    def test_attention_rows_sum_to_one(self, rng):
        op, norm = _op("mhsa_head8")
        x = Tensor(rng.standard_normal((6, 8)))
        for weights in attention_weights(x, slot_params(norm, op), 8, lengths=[2, 4]):
            np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-12)

    def test_packed_batch_matches_separate_utterances(self, rng):
        op, norm = _op("mhsa_head4")
        op.eval()
        a, b = rng.standard_normal((3, 8)), rng.standard_normal((5, 8))
        with no_grad():
            packed = op(Tensor(np.vstack([a, b])), norm(Tensor(np.vstack([a, b]))), [3, 5]).data
            alone = [op(Tensor(u), norm(Tensor(u))).data for u in (a, b)]
        np.testing.assert_allclose(packed, np.vstack(alone), atol=1e-12)

    def test_two_frame_single_head_by_hand(self):
        eye, zero = np.eye(2), np.zeros(2)
        params = {name: Tensor(value) for name, value in {
            "norm_gain": np.ones(2), "norm_bias": zero,
            "q_weight": eye, "q_bias": zero, "k_weight": eye, "k_bias": zero,
            "v_weight": eye, "v_bias": zero, "out_weight": eye, "out_bias": zero,
        }.items()}
        # Normalized rows are [1, -1] and [-1, 1]; scaled scores are +-sqrt(2).
        x = Tensor(np.array([[2.0, 0.0], [0.0, 2.0]]))
        p = 1.0 / (1.0 + np.exp(-2.0 * np.sqrt(2.0)))
        c = 2.0 * p - 1.0
        with no_grad():
            out = mhsa_forward(x, params, 1, train_mode=False, relative_position=False).data
        np.testing.assert_allclose(out, [[2.0 + c, -c], [-c, 2.0 + c]], atol=1e-9)
        (weights,) = attention_weights(x, params, 1, relative_position=False)
        np.testing.assert_allclose(weights[0], [[p, 1.0 - p], [1.0 - p, p]], atol=1e-9)

    @pytest.mark.parametrize("relative_position", [True, False])
    def test_gradients(self, rng, relative_position):
        op, norm = _op("mhsa_head4", d_model=4)
        params = slot_params(norm, op)
        if not relative_position:
            params = {k: v for k, v in params.items() if not k.startswith("pos_")}
        names = list(params)
        for _ in range(TRIALS):
            _randomize(params, rng)
            x, w = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))

            def loss(x, *values):
                out = mhsa_forward(x, dict(zip(names, values)), 4, train_mode=False,
                                   relative_position=relative_position)
                return (out * w).sum()

            assert gradcheck(loss, [x] + [params[n].data for n in names]) < 1e-4


class TestConvolutionModule:

    def test_even_kernel_rejected(self, rng):
        op, norm = _op("conv_7")
        with pytest.raises(DimensionError):
            conv_module_forward(Tensor(rng.standard_normal((5, 8))), slot_params(norm, op), 4, 1, train_mode=False)

    def test_output_shape_and_running_stats(self, rng):
        op, norm = _op("dil_conv_7")
        x = Tensor(rng.standard_normal((10, 8)))
        before = op.buffer("running_mean").copy()
        assert op(x, norm(x), [4, 6]).shape == (10, 8)
        assert not np.array_equal(before, op.buffer("running_mean"))

    def test_eval_packed_batch_matches_separate_utterances(self, rng):
        op, norm = _op("conv_11")
        op.eval()
        a, b = rng.standard_normal((6, 8)), rng.standard_normal((9, 8))
        with no_grad():
            packed = op(Tensor(np.vstack([a, b])), norm(Tensor(np.vstack([a, b]))), [6, 9]).data
            alone = [op(Tensor(u), norm(Tensor(u))).data for u in (a, b)]
        np.testing.assert_allclose(packed, np.vstack(alone), atol=1e-12)

    @pytest.mark.parametrize("name,kernel,dilation", [("conv_7", 7, 1), ("dil_conv_7", 7, 2)])
    def test_gradients(self, rng, name, kernel, dilation):
        op, norm = _op(name, d_model=4)
        params = slot_params(norm, op)
        names = list(params)
        for _ in range(TRIALS):
            _randomize(params, rng)
            x, w = rng.standard_normal((9, 4)), rng.standard_normal((9, 4))

            def loss(x, *values):
                out = conv_module_forward(x, dict(zip(names, values)), kernel, dilation, train_mode=True,
                                          lengths=[4, 5])
                return (out * w).sum()

            assert gradcheck(loss, [x] + [params[n].data for n in names]) < 1e-4


class TestInputEmbedding:

    def test_zero_projection_leaves_positional_rows(self):
        params = {"weight": Tensor(np.zeros((3, 6))), "bias": Tensor(np.zeros(6))}
        out = embed_input(Tensor(np.ones((5, 3))), params, train_mode=False, lengths=[2, 3]).data
        assert out.shape == (5, 6)
        np.testing.assert_allclose(out[0], [0.0, 1.0] * 3, atol=1e-15)
        np.testing.assert_allclose(out[1, :2], [np.sin(1.0), np.cos(1.0)])
        # Positions restart for the second utterance.
        np.testing.assert_array_equal(out[2], out[0])

    def test_width_mismatch(self):
        params = {"weight": Tensor(np.zeros((3, 6))), "bias": Tensor(np.zeros(6))}
        with pytest.raises(DimensionError):
            embed_input(Tensor(np.ones((5, 4))), params, train_mode=False)

    def test_gradients(self, rng):
        for _ in range(TRIALS):
            x, weight, bias = rng.standard_normal((5, 3)), rng.standard_normal((3, 6)), rng.standard_normal(6)
            m = rng.standard_normal((5, 6))

            def loss(x, weight, bias):
                return (embed_input(x, {"weight": weight, "bias": bias}, False, [2, 3]) * m).sum()

            assert gradcheck(loss, [x, weight, bias]) < 1e-4


class TestDropout:

    def test_train_mode_dropout_is_seeded(self, rng):
        x = rng.standard_normal((6, 8))
        outs = []
        for _ in range(2):
            op, norm = _op("ffn_256", dropout=0.5, seed=7)
            outs.append(op(Tensor(x), norm(Tensor(x))).data)
        np.testing.assert_array_equal(outs[0], outs[1])

    def test_eval_mode_disables_dropout(self, rng):
        op, norm = _op("ffn_256", dropout=0.5)
        op.eval()
        x = Tensor(rng.standard_normal((6, 8)))
        np.testing.assert_array_equal(op(x, norm(x)).data, op(x, norm(x)).data)


class TestSegments:

    def test_lengths_must_cover_batch(self):
        with pytest.raises(DimensionError):
            segments([2, 3], 6)

    def test_spans(self):
        assert segments([2, 3], 5) == [(0, 2), (2, 3)]
        assert segments(None, 4) == [(0, 4)]
