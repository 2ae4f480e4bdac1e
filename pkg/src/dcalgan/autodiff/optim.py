"""Adam with bias correction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import ConfigError
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    lr: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor], **hyper) -> AdamState:
        state = cls(**hyper)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray | None],
              state: AdamState) -> bool:
    """Apply one Adam update in place.

    Missing gradients count as zero. If any gradient is non-finite the step
    is skipped (nothing changes, not even ``step_count``) and False is returned.
    """
    for name, p in params.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        g = grads.get(name)
        if g is not None and g.shape != p.shape:
            raise ConfigError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        if state.m[name].shape != p.shape:
            raise ConfigError(f"optimizer state for {name} has shape {state.m[name].shape}, expected {p.shape}")
    if any(g is not None and not np.all(np.isfinite(g)) for g in grads.values()):
        logger.warning("non-finite gradient at step %d; update skipped", state.step_count + 1)
        return False

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        mhat = m / corr1
        vhat = v / corr2
        p.data -= (state.lr * mhat / (np.sqrt(vhat) + state.epsilon)).astype(p.dtype, copy=False)
    return True
