"""Adam updates, the Noam learning-rate schedule and gradient clipping."""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..core.exceptions import ConfigurationError
from ..models.module import Parameter
from ..schemas.config import NoamConfig

logger = logging.getLogger(__name__)


def noam_lrate(step: int, config: NoamConfig) -> float:
    """lr_scale * d_model^-0.5 * min(S * warmup^-1.5, S^-0.5)."""
    if step < 1:
        raise ConfigurationError(f"the Noam rate is undefined at step {step}; steps start at 1")
    return config.lr_scale * config.d_model ** -0.5 * min(step * config.warmup_steps ** -1.5, step ** -0.5)


@dataclass
class AdamMoments:
    """First/second moment estimates keyed by parameter name, plus the step count."""
    first: Dict[str, np.ndarray] = field(default_factory=dict)
    second: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def state_dict(self, prefix: str) -> Dict[str, np.ndarray]:
        state = {f"{prefix}.m.{k}": v.copy() for k, v in self.first.items()}
        state.update({f"{prefix}.v.{k}": v.copy() for k, v in self.second.items()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], prefix: str, step: int) -> None:
        self.first = {k[len(prefix) + 3:]: v.copy() for k, v in state.items() if k.startswith(f"{prefix}.m.")}
        self.second = {k[len(prefix) + 3:]: v.copy() for k, v in state.items() if k.startswith(f"{prefix}.v.")}
        self.step = step


def adam_step(
    params: Dict[str, Parameter],
    grads: Dict[str, np.ndarray],
    moments: AdamMoments,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
) -> None:
    """One bias-corrected Adam update, in place. Parameters without a gradient are left alone."""
    moments.step += 1
    correction1 = 1.0 - beta1 ** moments.step
    correction2 = 1.0 - beta2 ** moments.step
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        m = moments.first.get(name)
        v = moments.second.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        moments.first[name], moments.second[name] = m, v
        param.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + eps)


def adam_update_alpha(
    alpha: Sequence[Parameter],
    grads: Optional[Dict[str, np.ndarray]] = None,
    moments: Optional[AdamMoments] = None,
    lr: float = 3e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamMoments:
    """Adam step on architecture logits; ``grads`` defaults to each parameter's ``.grad``."""
    moments = moments if moments is not None else AdamMoments()
    params = {p.name: p for p in alpha}
    if grads is None:
        grads = {p.name: p.grad for p in alpha if p.grad is not None}
    adam_step(params, grads, moments, lr, beta1, beta2, eps)
    return moments


def global_grad_norm(grads: Dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global norm is at most ``max_norm``; returns the norm before clipping."""
    norm = global_grad_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


class NoamOptimizer:
    """Adam whose rate follows the Noam schedule, with global-norm clipping."""

    def __init__(
        self, named_params: Dict[str, Parameter], config: NoamConfig, moments: Optional[AdamMoments] = None
    ):
        self.params = named_params
        self.config = config
        self.moments = moments if moments is not None else AdamMoments()

    def collect_grads(self) -> Dict[str, np.ndarray]:
        return {name: p.grad for name, p in self.params.items() if p.grad is not None}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, schedule_step: int) -> float:
        """Apply one update at the rate for ``schedule_step``; returns that rate."""
        grads = self.collect_grads()
        norm = clip_grad_norm(grads, self.config.grad_clip)
        lr = noam_lrate(schedule_step, self.config)
        adam_step(self.params, grads, self.moments, lr, self.config.beta1, self.config.beta2, self.config.eps)
        logger.debug(f"Noam step {schedule_step}: lr={lr:.3e}, grad_norm={norm:.3f}")
        return lr

    def parameter_list(self) -> List[Parameter]:
        return list(self.params.values())
