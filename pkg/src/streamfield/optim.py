"""Adam with per-parameter-group learning rates."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


def adam_step(params: dict, grads: dict, moments: dict, lr, step: int,
              beta1: float = BETA1, beta2: float = BETA2, eps: float = EPS) -> None:
    """One bias-corrected Adam update, in place.

    `moments` maps name -> (m, v); `lr` is a float or a name -> float map;
    `step` is the 1-based update count.
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k}")
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    for k, p in params.items():
        g = grads[k]
        if k not in moments:
            moments[k] = (np.zeros_like(p), np.zeros_like(p))
        m, v = moments[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        rate = lr[k] if isinstance(lr, dict) else lr
        p -= (rate / bc1) * m / (np.sqrt(v / bc2) + eps)


@dataclass
class Adam:
    lr: dict
    moments: dict = field(default_factory=dict)
    step_count: int = 0

    def step(self, params: dict, grads: dict) -> None:
        adam_step(params, grads, self.moments, self.lr, self.step_count + 1)
        self.step_count += 1
