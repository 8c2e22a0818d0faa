"""Differentiable primitives used by the candidate operations and the losses."""

from __future__ import annotations

import logging
from typing import Optional, Tuple

import numpy as np

from ..core.exceptions import DimensionError
from .tensor import Function, Matmul, Tensor, ArrayLike, as_tensor

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-12
BATCH_NORM_EPS = 1e-5


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Matmul.apply(a, b)


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    return as_tensor(a) + b


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return as_tensor(a) * b


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight + bias`` with ``weight`` stored as [in x out]."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError("linear input width does not match weight", x.shape, weight.shape)
    out = Matmul.apply(x, weight)
    return out if bias is None else out + bias


class _Relu(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.saved["mask"] = x > 0
        return np.where(self.saved["mask"], x, 0.0)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (grad * self.saved["mask"],)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    e = np.exp(x[~positive])
    out[~positive] = e / (1.0 + e)
    return out


class _Sigmoid(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        out = _stable_sigmoid(x)
        self.saved["out"] = out
        return out

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        out = self.saved["out"]
        return (grad * out * (1.0 - out),)


class _Swish(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        sig = _stable_sigmoid(x)
        self.saved["x"], self.saved["sig"] = x, sig
        return x * sig

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        x, sig = self.saved["x"], self.saved["sig"]
        return (grad * (sig + x * sig * (1.0 - sig)),)


class _Glu(Function):
    """Gated linear unit: first half of ``axis`` gated by sigmoid of the second half."""

    def forward(self, x: np.ndarray, axis: int = -1) -> np.ndarray:
        if x.shape[axis] % 2:
            raise DimensionError("GLU needs an even split axis", x.shape)
        a, b = np.split(x, 2, axis=axis)
        sig = _stable_sigmoid(b)
        self.saved.update(a=a, sig=sig, axis=axis)
        return a * sig

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        a, sig, axis = self.saved["a"], self.saved["sig"], self.saved["axis"]
        return (np.concatenate([grad * sig, grad * a * sig * (1.0 - sig)], axis=axis),)


def relu(x: Tensor) -> Tensor:
    return _Relu.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return _Sigmoid.apply(x)


def swish(x: Tensor) -> Tensor:
    return _Swish.apply(x)


def glu(x: Tensor, axis: int = -1) -> Tensor:
    return _Glu.apply(x, axis=axis)


class _Softmax(Function):
    def forward(self, x: np.ndarray, axis: int) -> np.ndarray:
        shifted = x - np.max(x, axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / np.sum(e, axis=axis, keepdims=True)
        self.saved.update(out=out, axis=axis)
        return out

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        out, axis = self.saved["out"], self.saved["axis"]
        inner = np.sum(grad * out, axis=axis, keepdims=True)
        return (out * (grad - inner),)


class _LogSoftmax(Function):
    def forward(self, x: np.ndarray, axis: int) -> np.ndarray:
        shifted = x - np.max(x, axis=axis, keepdims=True)
        out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
        self.saved.update(out=out, axis=axis)
        return out

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        out, axis = self.saved["out"], self.saved["axis"]
        return (grad - np.exp(out) * np.sum(grad, axis=axis, keepdims=True),)


def _check_axis(x: Tensor, axis: int) -> None:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} is out of range", x.shape)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_axis(x, axis)
    return _Softmax.apply(x, axis=axis)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_axis(x, axis)
    return _LogSoftmax.apply(x, axis=axis)


class _Normalize(Function):
    """Standardize along ``axis`` (population variance) then apply a last-axis affine."""

    def forward(
        self, x: np.ndarray, gain: np.ndarray, bias: np.ndarray, axis: int, eps: float
    ) -> np.ndarray:
        mean = np.mean(x, axis=axis, keepdims=True)
        var = np.mean((x - mean) ** 2, axis=axis, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean) * inv_std
        self.saved.update(xhat=xhat, inv_std=inv_std, gain=gain, axis=axis)
        return xhat * gain + bias

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        xhat, inv_std, gain, axis = (self.saved[k] for k in ("xhat", "inv_std", "gain", "axis"))
        reduce_axes = tuple(range(grad.ndim - 1))
        grad_gain = np.sum(grad * xhat, axis=reduce_axes)
        grad_bias = np.sum(grad, axis=reduce_axes)
        dxhat = grad * gain
        grad_x = inv_std * (
            dxhat
            - np.mean(dxhat, axis=axis, keepdims=True)
            - xhat * np.mean(dxhat * xhat, axis=axis, keepdims=True)
        )
        return grad_x, grad_gain, grad_bias


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Per-frame normalization over the feature axis."""
    if x.shape[-1] < 1:
        raise DimensionError("layer_norm needs at least one feature", x.shape)
    return _Normalize.apply(x, gain, bias, axis=-1, eps=eps)


def batch_norm(
    x: Tensor,
    gain: Tensor,
    bias: Tensor,
    running_mean: Optional[np.ndarray] = None,
    running_var: Optional[np.ndarray] = None,
    train_mode: bool = True,
    momentum: float = 0.1,
    eps: float = BATCH_NORM_EPS,
) -> Tensor:
    """Normalize over the batch-and-time axis (axis 0 of a packed [N x d] matrix).

    In train mode the current batch statistics are used and the running
    buffers, when given, are updated in place. In evaluation mode the running
    buffers are used.
    """
    if train_mode:
        if running_mean is not None and running_var is not None:
            n = x.shape[0]
            batch_var = np.var(x.data, axis=0) * (n / max(n - 1, 1))
            running_mean *= 1.0 - momentum
            running_mean += momentum * np.mean(x.data, axis=0)
            running_var *= 1.0 - momentum
            running_var += momentum * batch_var
        return _Normalize.apply(x, gain, bias, axis=0, eps=eps)
    if running_mean is None or running_var is None:
        raise DimensionError("evaluation-mode batch_norm needs running statistics", x.shape)
    scale = 1.0 / np.sqrt(running_var + eps)
    return (x - running_mean) * scale * gain + bias


class _Dropout(Function):
    def forward(self, x: np.ndarray, mask: np.ndarray) -> np.ndarray:
        self.saved["mask"] = mask
        return x * mask

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (grad * self.saved["mask"],)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], train_mode: bool) -> Tensor:
    """Inverted dropout; the sampled mask is kept for the backward rule."""
    if not train_mode or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs a random generator")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(np.float64) / (1.0 - rate)
    return _Dropout.apply(x, mask=mask)


class _DepthwiseConv1d(Function):
    """Per-channel 1-D cross-correlation with zero 'same' padding."""

    def forward(self, x: np.ndarray, kernel: np.ndarray, dilation: int) -> np.ndarray:
        length = x.shape[0]
        taps = kernel.shape[0]
        pad = (taps - 1) * dilation // 2
        padded = np.pad(x, ((pad, pad), (0, 0)))
        out = np.zeros_like(x)
        for j in range(taps):
            start = j * dilation
            out += kernel[j] * padded[start:start + length]
        self.saved.update(padded=padded, kernel=kernel, dilation=dilation, pad=pad)
        return out

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        padded, kernel = self.saved["padded"], self.saved["kernel"]
        dilation, pad = self.saved["dilation"], self.saved["pad"]
        length = grad.shape[0]
        grad_padded = np.zeros_like(padded)
        grad_kernel = np.zeros_like(kernel)
        for j in range(kernel.shape[0]):
            start = j * dilation
            window = slice(start, start + length)
            grad_padded[window] += kernel[j] * grad
            grad_kernel[j] = np.sum(grad * padded[window], axis=0)
        return grad_padded[pad:pad + length], grad_kernel


def receptive_field(kernel_size: int, dilation: int) -> int:
    return (kernel_size - 1) * dilation + 1


def depthwise_conv1d(x: Tensor, kernel: Tensor, dilation: int = 1) -> Tensor:
    """Convolve each channel of ``x`` [T x d] with its column of ``kernel`` [k x d]."""
    if kernel.shape[0] % 2 == 0:
        raise DimensionError(f"depthwise kernel size must be odd, got {kernel.shape[0]}", kernel.shape)
    if dilation < 1:
        raise DimensionError(f"dilation must be at least 1, got {dilation}")
    if x.ndim != 2 or kernel.ndim != 2 or x.shape[1] != kernel.shape[1]:
        raise DimensionError("depthwise channels disagree", x.shape, kernel.shape)
    return _DepthwiseConv1d.apply(x, kernel, dilation=int(dilation))


def sinusoidal_table(positions: np.ndarray, dim: int) -> np.ndarray:
    """Standard sin/cos table: even columns sin, odd columns cos."""
    positions = np.asarray(positions, dtype=np.float64)[:, None]
    rates = np.exp(-np.log(10000.0) * np.arange(0, dim, 2, dtype=np.float64) / dim)
    table = np.zeros((positions.shape[0], dim), dtype=np.float64)
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates)[:, : dim // 2]
    return table
