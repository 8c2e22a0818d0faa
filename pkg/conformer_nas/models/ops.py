"""Candidate operations and fixed block plumbing.

All operations act on a packed batch: utterances are concatenated along time
into one [N x d] matrix and ``lengths`` gives each utterance's frame count.
Frame-wise layers run on the packed matrix directly; attention and the
depthwise convolution run per utterance; batch-norm statistics span every
frame of the batch.
"""

import logging
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ..autograd import (
    Tensor,
    batch_norm,
    concat,
    depthwise_conv1d,
    dropout,
    glu,
    layer_norm,
    linear,
    no_grad,
    sinusoidal_table,
    softmax,
    swish,
)
from ..core.exceptions import DimensionError, GenotypeError
from ..schemas.genotype import CandidateOpSpec, Slot
from .module import Initializer, Module, Parameter

logger = logging.getLogger(__name__)

Params = Mapping[str, Tensor]


def segments(lengths: Optional[Sequence[int]], total: int) -> List[Tuple[int, int]]:
    """(start, length) per utterance; a missing ``lengths`` means one utterance."""
    if lengths is None:
        return [(0, total)]
    if sum(lengths) != total:
        raise DimensionError(f"lengths sum to {sum(lengths)} but the batch has {total} frames")
    spans, start = [], 0
    for length in lengths:
        spans.append((start, int(length)))
        start += int(length)
    return spans


def _split_heads(x: Tensor, heads: int) -> Tensor:
    length, width = x.shape
    return x.reshape(length, heads, width // heads).transpose(1, 0, 2)


def _relative_bias(
    q: Tensor, params: Params, heads: int, length: int, d_model: int
) -> Tensor:
    """Additive bias (q + v) . W_pos R_(i-j) for every query i and key j."""
    distances = np.arange(length - 1, -length, -1)
    table = Tensor(sinusoidal_table(distances, d_model))
    pos = _split_heads(linear(table, params["pos_weight"]), heads)
    v_bias = params["pos_bias_v"].reshape(heads, 1, d_model // heads)
    full = (q + v_bias) @ pos.transpose(0, 2, 1)
    rows = np.arange(length)[:, None]
    cols = (length - 1) - rows + np.arange(length)[None, :]
    return full[:, rows, cols]


def _attention(
    h: Tensor, params: Params, heads: int, spans: List[Tuple[int, int]], relative_position: bool
) -> Tuple[List[Tensor], List[Tensor]]:
    d_model = h.shape[1]
    scale = 1.0 / np.sqrt(d_model // heads)
    q_all = linear(h, params["q_weight"], params["q_bias"])
    k_all = linear(h, params["k_weight"], params["k_bias"])
    v_all = linear(h, params["v_weight"], params["v_bias"])
    contexts, weights = [], []
    for start, length in spans:
        q = _split_heads(q_all[start:start + length], heads)
        k = _split_heads(k_all[start:start + length], heads)
        v = _split_heads(v_all[start:start + length], heads)
        if relative_position:
            u_bias = params["pos_bias_u"].reshape(heads, 1, d_model // heads)
            scores = (q + u_bias) @ k.transpose(0, 2, 1)
            scores = scores + _relative_bias(q, params, heads, length, d_model)
        else:
            scores = q @ k.transpose(0, 2, 1)
        attn = softmax(scores * scale, axis=-1)
        weights.append(attn)
        contexts.append((attn @ v).transpose(1, 0, 2).reshape(length, d_model))
    return contexts, weights


def _check_heads(d_model: int, heads: int) -> None:
    if heads < 1 or d_model % heads:
        raise DimensionError(f"{heads} heads do not divide attention dimension {d_model}")


def mhsa_forward(
    x: Tensor,
    params: Params,
    heads: int,
    train_mode: bool,
    lengths: Optional[Sequence[int]] = None,
    rng: Optional[np.random.Generator] = None,
    dropout_rate: float = 0.0,
    relative_position: bool = True,
) -> Tensor:
    """Pre-norm multi-head self-attention with residual; ``params`` holds norm_* and projections."""
    _check_heads(x.shape[1], heads)
    h = layer_norm(x, params["norm_gain"], params["norm_bias"])
    return _mhsa_residual(x, h, params, heads, train_mode, lengths, rng, dropout_rate, relative_position)


def _mhsa_residual(x, h, params, heads, train_mode, lengths, rng, dropout_rate, relative_position) -> Tensor:
    contexts, _ = _attention(h, params, heads, segments(lengths, x.shape[0]), relative_position)
    out = linear(concat(contexts), params["out_weight"], params["out_bias"])
    return x + dropout(out, dropout_rate, rng, train_mode)


def attention_weights(
    x: Tensor,
    params: Params,
    heads: int,
    lengths: Optional[Sequence[int]] = None,
    relative_position: bool = True,
) -> List[np.ndarray]:
    """Per-utterance attention probabilities, each [heads x T x T]."""
    _check_heads(x.shape[1], heads)
    with no_grad():
        h = layer_norm(x, params["norm_gain"], params["norm_bias"])
        _, weights = _attention(h, params, heads, segments(lengths, x.shape[0]), relative_position)
    return [w.data for w in weights]


def conv_module_forward(
    x: Tensor,
    params: Params,
    kernel: int,
    dilation: int,
    train_mode: bool,
    lengths: Optional[Sequence[int]] = None,
    rng: Optional[np.random.Generator] = None,
    dropout_rate: float = 0.0,
    running_mean: Optional[np.ndarray] = None,
    running_var: Optional[np.ndarray] = None,
) -> Tensor:
    """Pre-norm convolution module with residual."""
    if kernel % 2 == 0:
        raise DimensionError(f"convolution kernel must be odd, got {kernel}")
    h = layer_norm(x, params["norm_gain"], params["norm_bias"])
    return _conv_residual(x, h, params, dilation, train_mode, lengths, rng, dropout_rate, running_mean, running_var)


def _conv_residual(x, h, params, dilation, train_mode, lengths, rng, dropout_rate, running_mean, running_var) -> Tensor:
    gated = glu(linear(h, params["pw1_weight"], params["pw1_bias"]), axis=-1)
    convolved = concat([
        depthwise_conv1d(gated[start:start + length], params["dw_kernel"], dilation)
        for start, length in segments(lengths, x.shape[0])
    ])
    normed = batch_norm(
        convolved, params["bn_gain"], params["bn_bias"], running_mean, running_var, train_mode=train_mode
    )
    out = linear(swish(normed), params["pw2_weight"], params["pw2_bias"])
    return x + dropout(out, dropout_rate, rng, train_mode)


def ffn_forward(
    x: Tensor,
    params: Params,
    hidden_dim: int,
    train_mode: bool,
    rng: Optional[np.random.Generator] = None,
    dropout_rate: float = 0.0,
) -> Tensor:
    """Pre-norm position-wise feed-forward network with residual."""
    if params["w1"].shape[1] != hidden_dim:
        raise DimensionError(f"ffn hidden width is {params['w1'].shape[1]}, expected {hidden_dim}")
    h = layer_norm(x, params["norm_gain"], params["norm_bias"])
    return _ffn_residual(x, h, params, train_mode, rng, dropout_rate)


def _ffn_residual(x, h, params, train_mode, rng, dropout_rate) -> Tensor:
    hidden = dropout(swish(linear(h, params["w1"], params["b1"])), dropout_rate, rng, train_mode)
    out = linear(hidden, params["w2"], params["b2"])
    return x + dropout(out, dropout_rate, rng, train_mode)


class DropoutContext:
    """Shared dropout settings and random stream for one network."""

    def __init__(self, rate: float, seed: int):
        self.rate = rate
        self.rng = np.random.default_rng([seed & 0xFFFFFFFF, 0xD50])


class CandidateOp(Module):
    """One instantiated candidate; ``forward`` takes the raw and pre-normed input."""

    def __init__(self, spec: CandidateOpSpec, context: DropoutContext):
        super().__init__()
        self.spec = spec
        self._context = context

    @property
    def name(self) -> str:
        return self.spec.name

    def forward(self, x: Tensor, normed: Tensor, lengths: Optional[Sequence[int]] = None) -> Tensor:
        raise NotImplementedError


class Identity(CandidateOp):
    def forward(self, x: Tensor, normed: Optional[Tensor] = None, lengths: Optional[Sequence[int]] = None) -> Tensor:
        return x


class MultiHeadSelfAttention(CandidateOp):
    def __init__(self, spec: CandidateOpSpec, d_model: int, init: Initializer, context: DropoutContext,
                 relative_position: bool = True):
        super().__init__(spec, context)
        _check_heads(d_model, spec.heads)
        self.heads = spec.heads
        self.relative_position = relative_position
        for proj in ("q", "k", "v", "out"):
            setattr(self, f"{proj}_weight", init.uniform(f"{proj}_weight", (d_model, d_model), d_model))
            setattr(self, f"{proj}_bias", init.uniform(f"{proj}_bias", (d_model,), d_model))
        if relative_position:
            self.pos_weight = init.uniform("pos_weight", (d_model, d_model), d_model)
            self.pos_bias_u = init.zeros("pos_bias_u", (d_model,))
            self.pos_bias_v = init.zeros("pos_bias_v", (d_model,))

    def forward(self, x: Tensor, normed: Tensor, lengths: Optional[Sequence[int]] = None) -> Tensor:
        return _mhsa_residual(x, normed, self.own_parameters(), self.heads, self.training, lengths,
                              self._context.rng, self._context.rate, self.relative_position)


class ConvolutionModule(CandidateOp):
    def __init__(self, spec: CandidateOpSpec, d_model: int, init: Initializer, context: DropoutContext):
        super().__init__(spec, context)
        if spec.kernel % 2 == 0:
            raise DimensionError(f"convolution kernel must be odd, got {spec.kernel}")
        self.kernel, self.dilation = spec.kernel, spec.dilation
        self.pw1_weight = init.uniform("pw1_weight", (d_model, 2 * d_model), d_model)
        self.pw1_bias = init.uniform("pw1_bias", (2 * d_model,), d_model)
        self.dw_kernel = init.uniform("dw_kernel", (spec.kernel, d_model), spec.kernel)
        self.bn_gain = init.ones("bn_gain", (d_model,))
        self.bn_bias = init.zeros("bn_bias", (d_model,))
        self.pw2_weight = init.uniform("pw2_weight", (d_model, d_model), d_model)
        self.pw2_bias = init.uniform("pw2_bias", (d_model,), d_model)
        self.register_buffer("running_mean", np.zeros(d_model))
        self.register_buffer("running_var", np.ones(d_model))

    def forward(self, x: Tensor, normed: Tensor, lengths: Optional[Sequence[int]] = None) -> Tensor:
        return _conv_residual(x, normed, self.own_parameters(), self.dilation, self.training, lengths,
                              self._context.rng, self._context.rate,
                              self.buffer("running_mean"), self.buffer("running_var"))


class FeedForward(CandidateOp):
    def __init__(self, spec: CandidateOpSpec, d_model: int, init: Initializer, context: DropoutContext):
        super().__init__(spec, context)
        self.hidden_dim = spec.hidden_dim
        self.w1 = init.uniform("w1", (d_model, spec.hidden_dim), d_model)
        self.b1 = init.uniform("b1", (spec.hidden_dim,), d_model)
        self.w2 = init.uniform("w2", (spec.hidden_dim, d_model), spec.hidden_dim)
        self.b2 = init.uniform("b2", (d_model,), spec.hidden_dim)

    def forward(self, x: Tensor, normed: Tensor, lengths: Optional[Sequence[int]] = None) -> Tensor:
        return _ffn_residual(x, normed, self.own_parameters(), self.training, self._context.rng, self._context.rate)


def build_candidate(
    spec: CandidateOpSpec,
    d_model: int,
    init: Initializer,
    context: DropoutContext,
    relative_position: bool = True,
) -> CandidateOp:
    if spec.is_identity:
        return Identity(spec, context)
    if spec.module_slot is Slot.MHSA:
        return MultiHeadSelfAttention(spec, d_model, init, context, relative_position)
    if spec.module_slot is Slot.CONV:
        return ConvolutionModule(spec, d_model, init, context)
    if spec.module_slot is Slot.FFN:
        return FeedForward(spec, d_model, init, context)
    raise GenotypeError(f"no builder for candidate {spec.name!r}")


class SlotNorm(Module):
    """Pre-norm shared by every candidate of one slot."""

    def __init__(self, d_model: int, init: Initializer):
        super().__init__()
        self.gain = init.ones("gain", (d_model,))
        self.bias = init.zeros("bias", (d_model,))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


def positional_encoding(lengths: Sequence[int], d_model: int) -> np.ndarray:
    """Absolute sin/cos rows for a packed batch; positions restart per utterance."""
    positions = np.concatenate([np.arange(length) for length in lengths]) if lengths else np.zeros(0)
    return sinusoidal_table(positions, d_model)


def embed_input(
    features: Tensor,
    params: Params,
    train_mode: bool,
    lengths: Optional[Sequence[int]] = None,
    rng: Optional[np.random.Generator] = None,
    dropout_rate: float = 0.0,
) -> Tensor:
    """Project features [T x F] to [T x d] and add absolute positional encoding."""
    weight = params["weight"]
    if features.ndim != 2 or features.shape[1] != weight.shape[0]:
        raise DimensionError("feature width does not match the embedding", features.shape, weight.shape)
    d_model = weight.shape[1]
    lengths = [features.shape[0]] if lengths is None else list(lengths)
    segments(lengths, features.shape[0])
    projected = linear(features, weight, params["bias"])
    return dropout(projected + positional_encoding(lengths, d_model), dropout_rate, rng, train_mode)


class InputEmbedding(Module):
    def __init__(self, feature_dim: int, d_model: int, init: Initializer, context: DropoutContext):
        super().__init__()
        self._context = context
        self.weight = init.uniform("weight", (feature_dim, d_model), feature_dim)
        self.bias = init.uniform("bias", (d_model,), feature_dim)

    def forward(self, features: Tensor, lengths: Optional[Sequence[int]] = None) -> Tensor:
        return embed_input(features, self.own_parameters(), self.training, lengths,
                           self._context.rng, self._context.rate)


class OutputHead(Module):
    """Final layer-norm and projection to per-frame vocabulary logits."""

    def __init__(self, d_model: int, vocab_size: int, init: Initializer):
        super().__init__()
        self.norm = SlotNorm(d_model, init.child("norm"))
        self.weight = init.uniform("weight", (d_model, vocab_size), d_model)
        self.bias = init.uniform("bias", (vocab_size,), d_model)

    def forward(self, x: Tensor) -> Tensor:
        return linear(self.norm(x), self.weight, self.bias)


def slot_params(norm: SlotNorm, op: CandidateOp) -> Dict[str, Tensor]:
    """Flat parameter map accepted by the functional forwards."""
    params: Dict[str, Tensor] = dict(op.own_parameters())
    params["norm_gain"], params["norm_bias"] = norm.gain, norm.bias
    return params
