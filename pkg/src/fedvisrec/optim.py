"""Optimizers: plain SGD for the federated updates, Adam for inner fits."""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch


@dataclass
class AdamState:
    """Per-parameter Adam moments.  ``t`` counts completed steps."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(param, lr=0.001):
    param = np.asarray(param)
    return AdamState(m=np.zeros_like(param, dtype=np.float64),
                     v=np.zeros_like(param, dtype=np.float64), lr=lr)


def adam_step(param, grad, state):
    """One bias-corrected Adam update.  Returns (new_param, new_state)."""
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise ShapeMismatch(f"adam_step {param.shape} vs {grad.shape} vs {state.m.shape}")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_param = param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_param, AdamState(m=m, v=v, t=t, lr=state.lr,
                                beta1=state.beta1, beta2=state.beta2, eps=state.eps)


def sgd_apply(param, grad, lr):
    """param - lr * grad, with a shape guard."""
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape:
        raise ShapeMismatch(f"sgd_apply {param.shape} vs {grad.shape}")
    return param - lr * grad
