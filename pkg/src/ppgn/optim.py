"""RMSProp with parameter groups and the linear-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, NumericFailure
from .tensor import Tensor

RMSPROP_DECAY = 0.99
RMSPROP_EPS = 1e-8


def poly_lr(step: int, max_steps: int, base_lr: float) -> float:
    """Linear ramp from ``base_lr`` at step 0 down to 0 at ``max_steps``."""
    if step < 0:
        raise InvalidInputError(f"step must be non-negative, got {step}")
    if max_steps <= 0:
        raise InvalidInputError(f"max_steps must be positive, got {max_steps}")
    if step > max_steps:
        return 0.0
    return base_lr * (1.0 - step / max_steps)


@dataclass
class RmsPropState:
    """Per-parameter squared-gradient accumulators."""

    decay: float = RMSPROP_DECAY
    eps: float = RMSPROP_EPS
    acc: dict[str, np.ndarray] = field(default_factory=dict)


def rmsprop_step(
    params: dict[str, Tensor], grads: dict[str, np.ndarray],
    state: RmsPropState, lr: float,
):
    """One in-place RMSProp update: p <- p - lr * g / (sqrt(acc) + eps)."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise InvalidInputError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name} of shape {p.data.shape}"
            )
        acc = state.acc.get(name)
        if acc is None:
            acc = np.zeros_like(p.data)
            state.acc[name] = acc
        acc *= state.decay
        acc += (1.0 - state.decay) * g * g
        p.data -= lr * g / (np.sqrt(acc) + state.eps)
        if __debug__:
            if not np.all(np.isfinite(p.data)):
                raise NumericFailure(f"parameter {name} became non-finite")


class RmsProp:
    """Optimizer over named parameter groups with per-group LR scaling.

    ``groups`` maps a group label to ``(params, lr_scale)``; the backbone
    group trains at a fraction of the main rate.
    """

    def __init__(self, groups: dict[str, tuple[dict[str, Tensor], float]],
                 decay: float = RMSPROP_DECAY, eps: float = RMSPROP_EPS):
        self.groups = groups
        self.states = {label: RmsPropState(decay, eps) for label in groups}

    def step(self, lr: float):
        for label, (params, scale) in self.groups.items():
            grads = {
                name: p.grad for name, p in params.items() if p.grad is not None
            }
            rmsprop_step(params, grads, self.states[label], lr * scale)

    def zero_grad(self):
        for params, _ in self.groups.values():
            for p in params.values():
                p.grad = None
