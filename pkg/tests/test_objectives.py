"""CTC loss against brute-force alignment enumeration, decoding and error rates."""

import itertools
import math

import numpy as np
import pytest

from conformer_nas.autograd import Tensor, log_softmax
from conformer_nas.core.exceptions import InfeasibleAlignmentError
from conformer_nas.schemas.config import ObjectiveConfig
from conformer_nas.services.objectives import (
    BLANK,
    batch_loss,
    corpus_error_rate,
    ctc_greedy_decode,
    ctc_loss,
    edit_distance,
    min_frames,
    smoothing_penalty,
    token_error_rate,
)

from .gradcheck import gradcheck


def _collapse(path):
    out, previous = [], None
    for token in path:
        if token != previous and token != BLANK:
            out.append(token)
        previous = token
    return tuple(out)


def brute_force_ctc(logits, labels):
    log_probs = log_softmax(Tensor(logits)).data
    frames, vocab = log_probs.shape
    total = -math.inf
    for path in itertools.product(range(vocab), repeat=frames):
        if _collapse(path) == tuple(labels):
            total = np.logaddexp(total, sum(log_probs[t, s] for t, s in enumerate(path)))
    return -total


class TestCtcLoss:

    def test_matches_enumeration(self, rng):
        checked = 0
        while checked < 60:
            frames = int(rng.integers(1, 7))
            vocab = int(rng.integers(2, 5))
            length = int(rng.integers(0, 4))
            labels = tuple(int(t) for t in rng.integers(1, vocab, size=length))
            if min_frames(labels) > frames:
                continue
            logits = rng.standard_normal((frames, vocab)) * 2.0
            expected = brute_force_ctc(logits, labels)
            assert abs(ctc_loss(Tensor(logits), labels).item() - expected) <= 1e-8 * max(1.0, abs(expected))
            checked += 1

    def test_repeated_labels_need_a_separating_blank(self, rng):
        with pytest.raises(InfeasibleAlignmentError):
            ctc_loss(Tensor(rng.standard_normal((2, 3))), [1, 1])
        assert np.isfinite(ctc_loss(Tensor(rng.standard_normal((3, 3))), [1, 1]).item())

    def test_too_many_labels(self, rng):
        with pytest.raises(InfeasibleAlignmentError):
            ctc_loss(Tensor(rng.standard_normal((2, 4))), [1, 2, 3])

    def test_blank_label_rejected(self, rng):
        with pytest.raises(ValueError):
            ctc_loss(Tensor(rng.standard_normal((4, 3))), [1, 0])

    def test_empty_label_is_all_blank_path(self, rng):
        logits = rng.standard_normal((4, 3))
        expected = -log_softmax(Tensor(logits)).data[:, BLANK].sum()
        assert abs(ctc_loss(Tensor(logits), ()).item() - expected) < 1e-12

    def test_gradients(self, rng):
        for _ in range(20):
            frames = int(rng.integers(3, 7))
            labels = tuple(int(t) for t in rng.integers(1, 4, size=2))
            logits = rng.standard_normal((frames, 4))
            assert gradcheck(lambda x: ctc_loss(x, labels), [logits]) < 1e-4

    def test_batch_loss_is_mean_over_utterances(self, rng):
        a, b = rng.standard_normal((5, 3)), rng.standard_normal((4, 3))
        packed = batch_loss(Tensor(np.vstack([a, b])), [(1, 2), (2,)], [5, 4]).item()
        expected = (ctc_loss(Tensor(a), (1, 2)).item() + ctc_loss(Tensor(b), (2,)).item()) / 2
        assert abs(packed - expected) < 1e-12

    def test_smoothing_penalty(self, rng):
        assert abs(smoothing_penalty(Tensor(np.zeros((3, 5)))).item()) < 1e-12
        assert smoothing_penalty(Tensor(rng.standard_normal((3, 5)) * 3)).item() > 0
        logits = rng.standard_normal((4, 3))
        plain = batch_loss(Tensor(logits), [(1,)]).item()
        smoothed = batch_loss(Tensor(logits), [(1,)], objective=ObjectiveConfig(label_smoothing=True)).item()
        assert smoothed == pytest.approx(plain + 0.1 * smoothing_penalty(Tensor(logits)).item())


class TestDecoding:

    def test_greedy_collapse(self):
        logits = np.full((7, 4), -5.0)
        for t, token in enumerate([1, 1, 0, 1, 2, 2, 0]):
            logits[t, token] = 5.0
        assert ctc_greedy_decode(Tensor(logits)) == (1, 1, 2)


class TestErrorRate:

    @pytest.mark.parametrize("hyp,ref,expected", [
        ((1, 2, 3), (1, 2, 3), 0),
        ((1, 3), (1, 2, 3), 1),
        ((1, 2, 4, 3), (1, 2, 3), 1),
        ((), (1, 2), 2),
        ((2, 1), (1, 2), 2),
    ])
    def test_edit_distance(self, hyp, ref, expected):
        assert edit_distance(hyp, ref) == expected

    def test_token_error_rate(self):
        assert token_error_rate((1, 3), (1, 2, 3)) == pytest.approx(1 / 3)
        assert token_error_rate((), ()) == 0.0
        assert token_error_rate((1,), ()) == math.inf

    def test_corpus_rate_pools_edits(self):
        report = corpus_error_rate([((1,), (1, 2)), ((3, 3), (3,)), ((), ())])
        assert (report.edits, report.reference_tokens, report.utterances) == (2, 3, 3)
        assert report.rate == pytest.approx(2 / 3)
