"""CTC loss, greedy decoding and token error rate."""

import logging
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ..autograd import Function, Tensor, log_softmax
from ..core.exceptions import DimensionError, InfeasibleAlignmentError
from ..models.ops import segments
from ..schemas.config import ObjectiveConfig

logger = logging.getLogger(__name__)

BLANK = 0

LabelSequence = Tuple[int, ...]


def validate_labels(labels: Sequence[int], vocab_size: Optional[int] = None) -> LabelSequence:
    labels = tuple(int(token) for token in labels)
    for token in labels:
        if token == BLANK:
            raise ValueError("label sequences must not contain the blank id 0")
        if token < 0 or (vocab_size is not None and token >= vocab_size):
            raise ValueError(f"label id {token} outside [1, {vocab_size})")
    return labels


def min_frames(labels: Sequence[int]) -> int:
    """Shortest input that can emit ``labels``: one frame per token plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _extended(labels: Sequence[int]) -> np.ndarray:
    ext = np.zeros(2 * len(labels) + 1, dtype=np.int64)
    ext[1::2] = labels
    return ext


def _skip_mask(ext: np.ndarray) -> np.ndarray:
    skip = np.zeros(len(ext), dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    return skip


def ctc_alpha(log_probs: np.ndarray, ext: np.ndarray) -> np.ndarray:
    """Log forward variables over the blank-augmented label, [T x (2L+1)]."""
    frames, states = log_probs.shape[0], len(ext)
    emit = log_probs[:, ext]
    skip = _skip_mask(ext)
    alpha = np.full((frames, states), -np.inf)
    alpha[0, 0] = emit[0, 0]
    if states > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, frames):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]
    return alpha


def ctc_beta(log_probs: np.ndarray, ext: np.ndarray) -> np.ndarray:
    """Log backward variables excluding the emission at t, [T x (2L+1)]."""
    frames, states = log_probs.shape[0], len(ext)
    emit = log_probs[:, ext]
    skip = _skip_mask(ext)
    beta = np.full((frames, states), -np.inf)
    beta[-1, -1] = 0.0
    if states > 1:
        beta[-1, -2] = 0.0
    for t in range(frames - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc
    return beta


class _CtcNegLogLikelihood(Function):
    def forward(self, log_probs: np.ndarray, labels: LabelSequence) -> np.ndarray:
        ext = _extended(labels)
        alpha = ctc_alpha(log_probs, ext)
        final = alpha[-1, -1] if len(ext) == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
        self.saved.update(log_probs=log_probs, ext=ext, alpha=alpha, log_likelihood=final)
        return np.asarray(-final)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        log_probs, ext = self.saved["log_probs"], self.saved["ext"]
        alpha, log_likelihood = self.saved["alpha"], self.saved["log_likelihood"]
        occupancy = np.exp(alpha + ctc_beta(log_probs, ext) - log_likelihood)
        grad_log_probs = np.zeros_like(log_probs)
        frames = np.arange(log_probs.shape[0])[:, None]
        np.add.at(grad_log_probs, (frames, ext[None, :]), -occupancy)
        return (grad_log_probs * grad,)


def ctc_loss(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Negative log total path probability of ``labels`` under per-frame ``logits`` [T x vocab]."""
    if logits.ndim != 2:
        raise DimensionError("ctc_loss expects [T x vocab] logits", logits.shape)
    labels = validate_labels(labels, logits.shape[1])
    frames = logits.shape[0]
    needed = min_frames(labels)
    if frames < max(needed, 1):
        raise InfeasibleAlignmentError(
            f"{frames} frames cannot emit {len(labels)} labels (need at least {max(needed, 1)})"
        )
    return _CtcNegLogLikelihood.apply(log_softmax(logits, axis=-1), labels=labels)


def smoothing_penalty(logits: Tensor) -> Tensor:
    """Mean per-frame KL(uniform || posterior)."""
    vocab = logits.shape[-1]
    log_probs = log_softmax(logits, axis=-1)
    return -log_probs.mean() - math.log(vocab)


def batch_loss(
    logits: Tensor,
    labels: Sequence[Sequence[int]],
    lengths: Optional[Sequence[int]] = None,
    objective: Optional[ObjectiveConfig] = None,
) -> Tensor:
    """Mean CTC loss over the utterances of a packed batch, plus the optional smoothing term."""
    spans = segments(lengths, logits.shape[0])
    if len(spans) != len(labels):
        raise DimensionError(f"{len(spans)} utterances but {len(labels)} label sequences")
    total = None
    for (start, length), target in zip(spans, labels):
        term = ctc_loss(logits[start:start + length], target)
        total = term if total is None else total + term
    loss = total * (1.0 / len(spans))
    if objective is not None and objective.label_smoothing and objective.label_smoothing_weight > 0:
        loss = loss + smoothing_penalty(logits) * objective.label_smoothing_weight
    return loss


def ctc_greedy_decode(logits: Tensor) -> LabelSequence:
    """Per-frame argmax, collapse repeats, drop blanks."""
    best = np.argmax(np.asarray(logits.data if isinstance(logits, Tensor) else logits), axis=-1)
    decoded: List[int] = []
    previous = None
    for token in best.tolist():
        if token != previous and token != BLANK:
            decoded.append(token)
        previous = token
    return tuple(decoded)


def edit_distance(hyp: Sequence[int], ref: Sequence[int]) -> int:
    previous = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, start=1):
        current = [i] + [0] * len(ref)
        for j, r in enumerate(ref, start=1):
            current[j] = min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + (h != r))
        previous = current
    return previous[-1]


def token_error_rate(hyp: Sequence[int], ref: Sequence[int]) -> float:
    """Edit distance over reference length; an empty reference gives 0 or +inf."""
    if not ref:
        if hyp:
            logger.warning(f"Empty reference with {len(hyp)} hypothesis tokens: error rate is infinite")
            return math.inf
        return 0.0
    return edit_distance(hyp, ref) / len(ref)


@dataclass
class ErrorRateReport:
    rate: float
    edits: int
    reference_tokens: int
    utterances: int
    undefined: int = 0


def corpus_error_rate(pairs: Iterable[Tuple[Sequence[int], Sequence[int]]]) -> ErrorRateReport:
    """Total edits over total reference tokens across (hyp, ref) pairs."""
    edits = tokens = count = undefined = 0
    for hyp, ref in pairs:
        count += 1
        edits += edit_distance(hyp, ref)
        tokens += len(ref)
        if not ref and hyp:
            undefined += 1
    if tokens == 0:
        rate = 0.0 if edits == 0 else math.inf
    else:
        rate = edits / tokens
    return ErrorRateReport(rate=rate, edits=edits, reference_tokens=tokens, utterances=count, undefined=undefined)
