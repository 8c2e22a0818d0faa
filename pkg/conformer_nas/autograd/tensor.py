"""Dense double-precision tensors with tape-based reverse-mode differentiation.

Every differentiable primitive is a :class:`Function`. Applying one while the
current thread's :class:`Tape` is recording appends a :class:`TapeRecord`
(input tensors, output node id, and whatever the primitive saved for its
backward rule). :func:`backward` replays the tape in reverse, visiting each
record once and summing gradients across fan-out.
"""

from __future__ import annotations

import itertools
import logging
import threading
import weakref
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..core.exceptions import DimensionError

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]

_node_ids = itertools.count()
_state = threading.local()


class Function:
    """Base class for differentiable primitives.

    ``forward`` receives the raw ndarrays of the inputs and returns an ndarray.
    ``backward`` receives dL/d(output) and returns one gradient (or None) per input.
    """

    def __init__(self) -> None:
        self.saved: Dict[str, Any] = {}

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__}.forward is not implemented")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__}.backward is not implemented")

    @classmethod
    def apply(cls, *inputs: ArrayLike, **kwargs: Any) -> "Tensor":
        function = cls()
        tensors = tuple(as_tensor(x) for x in inputs)
        out = function.forward(*(t.data for t in tensors), **kwargs)
        tape = current_tape()
        requires_grad = tape.enabled and any(t.requires_grad for t in tensors)
        result = Tensor(out, requires_grad=requires_grad)
        if requires_grad:
            result.is_leaf = False
            tape.record(function, tensors, result)
        return result


@dataclass
class TapeRecord:
    function: Function
    inputs: Tuple["Tensor", ...]
    output_id: int
    output_ref: "weakref.ReferenceType[Tensor]"

    @property
    def input_ids(self) -> List[int]:
        return [t.node_id for t in self.inputs]


class Tape:
    """Ordered log of primitive applications for one worker thread."""

    def __init__(self) -> None:
        self.records: List[TapeRecord] = []
        self.enabled = True

    def __len__(self) -> int:
        return len(self.records)

    def record(self, function: Function, inputs: Tuple["Tensor", ...], output: "Tensor") -> None:
        self.records.append(TapeRecord(function, inputs, output.node_id, weakref.ref(output)))

    def reset(self) -> None:
        self.records.clear()

    def consumers(self, node_id: int) -> List[TapeRecord]:
        return [r for r in self.records if node_id in r.input_ids]

    def backward(self, loss: "Tensor") -> Dict[int, np.ndarray]:
        grads: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        leaves: Dict[int, Tensor] = {}
        if loss.is_leaf and loss.requires_grad:
            leaves[loss.node_id] = loss

        for record in reversed(self.records):
            grad = grads.pop(record.output_id, None)
            if grad is None:
                continue
            output = record.output_ref()
            if output is not None:
                output.grad = np.array(grad, dtype=np.float64)
            input_grads = record.function.backward(grad)
            for tensor, input_grad in zip(record.inputs, input_grads):
                if input_grad is None or not tensor.requires_grad:
                    continue
                if input_grad.shape != tensor.shape:
                    raise DimensionError(
                        f"{type(record.function).__name__} produced a gradient of the wrong shape",
                        input_grad.shape,
                        tensor.shape,
                    )
                previous = grads.get(tensor.node_id)
                grads[tensor.node_id] = input_grad if previous is None else previous + input_grad
                if tensor.is_leaf:
                    leaves[tensor.node_id] = tensor

        result: Dict[int, np.ndarray] = {}
        for node_id, tensor in leaves.items():
            grad = np.array(grads[node_id], dtype=np.float64)
            tensor.grad = grad if tensor.grad is None else tensor.grad + grad
            result[node_id] = tensor.grad
        return result


def current_tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = Tape()
        _state.tape = tape
    return tape


def reset_tape() -> None:
    current_tape().reset()


def is_recording() -> bool:
    return current_tape().enabled


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording on this thread's tape."""
    tape = current_tape()
    previous = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = previous


def backward(loss: "Tensor") -> Dict[int, np.ndarray]:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``.

    Returns a map from leaf node id to its gradient. The tape is reset afterward.
    """
    if loss.data.size != 1:
        raise DimensionError("backward requires a scalar loss", loss.shape)
    tape = current_tape()
    try:
        return tape.backward(loss)
    finally:
        tape.reset()


def as_tensor(value: ArrayLike) -> "Tensor":
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A dense float64 array participating in the recorded computation graph."""

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node_id = next(_node_ids)
        self.is_leaf = True
        self.name = name

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(self, Neg.apply(other))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(other, Neg.apply(self))

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return Mul.apply(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return Mul.apply(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        if isinstance(other, Tensor):
            return Mul.apply(self, Pow.apply(other, exponent=-1.0))
        return Mul.apply(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return Matmul.apply(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return GetItem.apply(self, index=index)

    def __pow__(self, exponent: float) -> "Tensor":
        return Pow.apply(self, exponent=float(exponent))

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        axes = range(self.ndim) if axis is None else ((axis,) if isinstance(axis, int) else axis)
        count = int(np.prod([self.shape[a] for a in axes])) if self.ndim else 1
        return Sum.apply(self, axis=axis, keepdims=keepdims) * (1.0 / max(count, 1))

    def reshape(self, *shape: Union[int, Sequence[int]]) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=tuple(shape))

    def transpose(self, *axes: int) -> "Tensor":
        return Transpose.apply(self, axes=tuple(axes) if axes else None)

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)


class Add(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.saved["shapes"] = (a.shape, b.shape)
        return a + b

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        a_shape, b_shape = self.saved["shapes"]
        return _unbroadcast(grad, a_shape), _unbroadcast(grad, b_shape)


class Neg(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        return -a

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (-grad,)


class Mul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.saved["a"], self.saved["b"] = a, b
        return a * b

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        a, b = self.saved["a"], self.saved["b"]
        return _unbroadcast(grad * b, a.shape), _unbroadcast(grad * a, b.shape)


class Pow(Function):
    def forward(self, a: np.ndarray, exponent: float) -> np.ndarray:
        self.saved["a"], self.saved["exponent"] = a, exponent
        return np.power(a, exponent)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        a, exponent = self.saved["a"], self.saved["exponent"]
        return (grad * exponent * np.power(a, exponent - 1.0),)


class Exp(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        out = np.exp(a)
        self.saved["out"] = out
        return out

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (grad * self.saved["out"],)


class Log(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        self.saved["a"] = a
        return np.log(a)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (grad / self.saved["a"],)


class Matmul(Function):
    """Matrix product; leading axes broadcast as in ``np.matmul``."""

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError("matmul inner dimensions disagree", a.shape, b.shape)
        self.saved["a"], self.saved["b"] = a, b
        return np.matmul(a, b)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        a, b = self.saved["a"], self.saved["b"]
        grad_a = np.matmul(grad, np.swapaxes(b, -1, -2))
        grad_b = np.matmul(np.swapaxes(a, -1, -2), grad)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)


class Sum(Function):
    def forward(self, a: np.ndarray, axis: Any = None, keepdims: bool = False) -> np.ndarray:
        self.saved.update(shape=a.shape, axis=axis, keepdims=keepdims)
        return np.sum(a, axis=axis, keepdims=keepdims)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        shape, axis, keepdims = self.saved["shape"], self.saved["axis"], self.saved["keepdims"]
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, shape).copy(),)


class Reshape(Function):
    def forward(self, a: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
        self.saved["shape"] = a.shape
        try:
            return a.reshape(shape)
        except ValueError as e:
            raise DimensionError(f"cannot reshape to {shape}", a.shape) from e

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (grad.reshape(self.saved["shape"]),)


class Transpose(Function):
    def forward(self, a: np.ndarray, axes: Optional[Tuple[int, ...]] = None) -> np.ndarray:
        if axes is None:
            axes = tuple(reversed(range(a.ndim)))
        self.saved["axes"] = axes
        return np.transpose(a, axes)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (np.transpose(grad, np.argsort(self.saved["axes"])),)


class GetItem(Function):
    def forward(self, a: np.ndarray, index: Any) -> np.ndarray:
        self.saved.update(shape=a.shape, index=index)
        return a[index]

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        full = np.zeros(self.saved["shape"], dtype=np.float64)
        np.add.at(full, self.saved["index"], grad)
        return (full,)


class Concat(Function):
    def forward(self, *arrays: np.ndarray, axis: int = 0) -> np.ndarray:
        self.saved["sizes"] = [a.shape[axis] for a in arrays]
        self.saved["axis"] = axis
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, ...]:
        cuts = np.cumsum(self.saved["sizes"])[:-1]
        return tuple(np.split(grad, cuts, axis=self.saved["axis"]))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if len(tensors) == 1:
        return tensors[0]
    return Concat.apply(*tensors, axis=axis)
