"""Adam on a flat parameter vector, plus the step-decay learning-rate rule."""

from __future__ import annotations

import numpy as np


class AdamState:
    """First/second-moment accumulators for one flat parameter vector."""

    def __init__(self, n_params: int, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float) -> np.ndarray:
    """One bias-corrected Adam update, in place on ``params``."""
    state.t += 1
    state.m += (1.0 - state.beta1) * (grads - state.m)
    state.v += (1.0 - state.beta2) * (grads * grads - state.v)
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    params -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


def lr_at_epoch(epoch: int, base_lr: float = 1e-3, halve_every: int = 30) -> float:
    """Step decay: the base rate halves every ``halve_every`` epochs."""
    return base_lr * 0.5 ** (epoch // halve_every)
