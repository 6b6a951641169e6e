"""
services/nn_optim.py
--------------------------------
Optimizers over the trainable values of a ParameterVector; BN running
statistics pass through untouched.

Momentum SGD with L2 weight decay (clients, centralized training, students):
    d = g + weight_decay * theta
    v = momentum * v + d        (v = d on the first step)
    theta = theta - lr * v

Adam (generator training), bias-corrected:
    m = b1 * m + (1 - b1) * g
    s = b2 * s + (1 - b2) * g^2
    theta = theta - lr * (m / (1 - b1^t)) / (sqrt(s / (1 - b2^t)) + eps)
"""

from __future__ import annotations
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from services.nn_params import ParameterVector
from utils.exceptions import NumericError, ShapeError


@dataclass
class SGDState:
    velocity: Optional[np.ndarray] = None


def _checked(params: ParameterVector, gradient: ParameterVector) -> np.ndarray:
    if not params.compatible(gradient):
        raise ShapeError("[nn_optim] gradient layout does not match params")
    g = gradient.values
    if not np.all(np.isfinite(g)):
        bad = int(np.flatnonzero(~np.isfinite(g))[0])
        layer = next((s.layer for s in params.layout.slots if s.offset <= bad < s.offset + s.size), None)
        raise NumericError(f"[nn_optim] non-finite gradient entry at index {bad}", layer=layer)
    return g


def sgd_step(
    params: ParameterVector,
    gradient: ParameterVector,
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    state: Optional[SGDState] = None,
) -> Tuple[ParameterVector, SGDState]:
    g = _checked(params, gradient)
    state = state or SGDState()
    d = g + weight_decay * params.values if weight_decay else g
    if momentum:
        v = d.copy() if state.velocity is None else momentum * state.velocity + d
    else:
        v = d
    return params.with_values(params.values - lr * v), SGDState(velocity=v if momentum else None)


@dataclass
class AdamState:
    step: int = 0
    m: Optional[np.ndarray] = None
    s: Optional[np.ndarray] = None


def adam_step(
    params: ParameterVector,
    gradient: ParameterVector,
    lr: float,
    betas: Tuple[float, float] = (0.5, 0.999),
    eps: float = 1e-8,
    state: Optional[AdamState] = None,
) -> Tuple[ParameterVector, AdamState]:
    """Per-entry step size is bounded by about lr, whatever the gradient scale."""
    g = _checked(params, gradient)
    state = state or AdamState()
    b1, b2 = betas
    t = state.step + 1
    m = (1.0 - b1) * g if state.m is None else b1 * state.m + (1.0 - b1) * g
    s = (1.0 - b2) * g * g if state.s is None else b2 * state.s + (1.0 - b2) * g * g
    m_hat = m / (1.0 - b1 ** t)
    s_hat = s / (1.0 - b2 ** t)
    return params.with_values(params.values - lr * m_hat / (np.sqrt(s_hat) + eps)), AdamState(t, m, s)
