"""Parameter containers with path-keyed deterministic initialization."""

import logging
import zlib
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from ..autograd import Tensor
from ..core.exceptions import DimensionError

logger = logging.getLogger(__name__)


class Parameter(Tensor):
    """A leaf tensor that always requires gradients."""

    def __init__(self, data: np.ndarray, name: Optional[str] = None):
        super().__init__(np.array(data, dtype=np.float64, copy=True), requires_grad=True, name=name)


class Initializer:
    """Draws every tensor from a stream keyed by (seed, parameter path).

    Two networks built with the same seed therefore agree on every parameter
    whose path they share, regardless of construction order.
    """

    def __init__(self, seed: int, prefix: str = ""):
        self.seed = int(seed)
        self.prefix = prefix

    def child(self, name: str) -> "Initializer":
        return Initializer(self.seed, f"{self.prefix}.{name}" if self.prefix else name)

    def _rng(self, name: str) -> np.random.Generator:
        path = f"{self.prefix}.{name}" if self.prefix else name
        return np.random.default_rng([self.seed & 0xFFFFFFFF, zlib.crc32(path.encode("utf-8"))])

    def uniform(self, name: str, shape: Tuple[int, ...], fan_in: int) -> Parameter:
        bound = 1.0 / np.sqrt(max(fan_in, 1))
        return Parameter(self._rng(name).uniform(-bound, bound, size=shape), name=name)

    def ones(self, name: str, shape: Tuple[int, ...]) -> Parameter:
        return Parameter(np.ones(shape), name=name)

    def zeros(self, name: str, shape: Tuple[int, ...]) -> Parameter:
        return Parameter(np.zeros(shape), name=name)


class Module:
    """Base class: tracks parameters, buffers and child modules by attribute order."""

    def __init__(self) -> None:
        self.training = True
        self._buffers: Dict[str, np.ndarray] = {}

    def forward(self, *args, **kwargs):
        raise NotImplementedError(f"{type(self).__name__}.forward is not implemented")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = np.array(value, dtype=np.float64, copy=True)

    def buffer(self, name: str) -> np.ndarray:
        return self._buffers[name]

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{index}", item
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{key}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in self._children():
            path = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield path, value
            else:
                yield from value.named_parameters(prefix=f"{path}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, value in self._buffers.items():
            yield f"{prefix}{name}", value
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(prefix=f"{prefix}{name}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def own_parameters(self) -> Dict[str, Parameter]:
        return {name: value for name, value in self._children() if isinstance(value, Parameter)}

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({f"buffer:{name}": b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | {f"buffer:{n}" for n in buffers}
        missing = expected - set(state)
        if missing:
            raise DimensionError(f"state is missing {len(missing)} entries, e.g. {sorted(missing)[0]}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise DimensionError(f"shape mismatch for {name}", state[name].shape, p.shape)
            p.data[...] = state[name]
        for name, b in buffers.items():
            b[...] = state[f"buffer:{name}"]
