"""Bias-corrected Adam, shared by autoencoder training and registration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["AdamState", "adam_step"]


@dataclass
class AdamState:
    """First/second moment estimates for one parameter array."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, param: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), 0)


def adam_step(state: AdamState, grad: np.ndarray, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> np.ndarray:
    """Advance `state` by one step and return the parameter delta.

    Standard recurrence: moments are exponential averages of the gradient
    and its square; both are bias-corrected by 1 - beta^t before forming
    the update -lr * m_hat / (sqrt(v_hat) + eps).
    """
    if not np.all(np.isfinite(grad)):
        raise ValueError("non-finite gradient passed to adam_step")
    if grad.shape != state.m.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match state {state.m.shape}")
    state.step += 1
    t = state.step
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * np.square(grad)
    m_hat = state.m / (1.0 - beta1**t)
    v_hat = state.v / (1.0 - beta2**t)
    return (-lr * m_hat / (np.sqrt(v_hat) + eps)).astype(grad.dtype, copy=False)
