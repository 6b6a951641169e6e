"""
services/inv_losses.py
--------------------------------
Purpose
-------
Generator objectives for data-free inversion of a frozen teacher:

    L_ce  = CE(teacher(x), y)
    L_div = -(1/N) sum_i w_i KL(teacher(x_i) || student(x_i)),  w_i = [argmax t_i != argmax s_i]
    L_bn  = sum_l ||mu_l(x) - mu_l|| + ||var_l(x) - var_l||   (teacher running stats as reference)
    L     = L_ce + lambda_div * L_div + lambda_bn * L_bn

Public API
----------
- gen_ce_loss, gen_div_loss, gen_bn_loss, gen_total_loss (scalars)
- gen_losses_and_input_grad(...) -> (components, dL/dx)

Notes
-----
- Teacher and student are evaluated in eval mode. Batch statistics of the
  teacher's pre-normalization activations come from the eval-mode tape.
- w_i is treated as a constant when differentiating.
"""

from __future__ import annotations
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.special import softmax

from services.nn_core import FrozenModel, Tape, backward
from services.nn_losses import log_probs, loss_ce_and_grad
from services.nn_spec import require_bn


def _check_labels(y_hat: np.ndarray, trained_classes: Optional[Sequence[int]]) -> np.ndarray:
    y = np.asarray(y_hat, dtype=np.int64).reshape(-1)
    if trained_classes is not None:
        extra = sorted(set(y.tolist()) - {int(c) for c in trained_classes})
        if extra:
            raise ValueError(f"[inv_losses] labels {extra} are outside the teacher's trained classes")
    return y


def gen_ce_loss(
    teacher: FrozenModel, x_hat: np.ndarray, y_hat: np.ndarray, trained_classes: Optional[Sequence[int]] = None
) -> float:
    y = _check_labels(y_hat, trained_classes)
    return loss_ce_and_grad(teacher.logits(x_hat), y)[0]


def _div_terms(t: np.ndarray, s: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    """(L_div, dL/dt, dL/ds) with w held constant."""
    n = t.shape[0]
    w = (t.argmax(axis=1) != s.argmax(axis=1)).astype(np.float64)
    p, q = softmax(t, axis=1), softmax(s, axis=1)
    logp, logq = log_probs(t), log_probs(s)
    rows = (p * (logp - logq)).sum(axis=1)
    loss = -float((w * rows).sum() / n)
    d_t = -(w[:, None] * p * (logp - logq - rows[:, None])) / n
    d_s = -(w[:, None] * (q - p)) / n
    return loss, d_t, d_s


def gen_div_loss(teacher: FrozenModel, student: FrozenModel, x_hat: np.ndarray) -> float:
    return _div_terms(teacher.logits(x_hat), student.logits(x_hat))[0]


def _unit(v: np.ndarray) -> Tuple[float, np.ndarray]:
    norm = float(np.linalg.norm(v))
    return norm, (v / norm if norm > 0 else np.zeros_like(v))


def _bn_terms(teacher: FrozenModel, tape: Tape, weight: float) -> Tuple[float, Dict[int, np.ndarray]]:
    """L_bn and, per BN layer, weight * dL_bn / d(pre-normalization input)."""
    total = 0.0
    inject: Dict[int, np.ndarray] = {}
    for layer in teacher.spec.bn_layers():
        mu_b, var_b = tape.bn_batch[layer]
        mu_r, var_r = teacher.params.bn_stats[layer]
        n_mu, g_mu = _unit(mu_b - mu_r)
        n_var, g_var = _unit(var_b - var_r)
        total += n_mu + n_var
        a = tape.bn_inputs[layer]
        m = a.size // mu_b.size
        shape = (1, -1) if a.ndim == 2 else (1, -1, 1, 1)
        centered = a - mu_b.reshape(shape)
        inject[layer] = weight * (g_mu.reshape(shape) / m + g_var.reshape(shape) * 2.0 * centered / m)
    return total, inject


def gen_bn_loss(teacher: FrozenModel, x_hat: np.ndarray) -> float:
    require_bn(teacher.spec)
    _, tape = teacher.with_tape(x_hat)
    return _bn_terms(teacher, tape, 1.0)[0]


def gen_total_loss(
    teacher: FrozenModel,
    student: FrozenModel,
    x_hat: np.ndarray,
    y_hat: np.ndarray,
    lambda_div: float,
    lambda_bn: float,
    trained_classes: Optional[Sequence[int]] = None,
) -> float:
    comps, _ = gen_losses_and_input_grad(teacher, student, x_hat, y_hat, lambda_div, lambda_bn, trained_classes)
    return comps["total"]


def gen_losses_and_input_grad(
    teacher: FrozenModel,
    student: FrozenModel,
    x_hat: np.ndarray,
    y_hat: np.ndarray,
    lambda_div: float,
    lambda_bn: float,
    trained_classes: Optional[Sequence[int]] = None,
) -> Tuple[Dict[str, float], np.ndarray]:
    require_bn(teacher.spec)
    y = _check_labels(y_hat, trained_classes)
    t, t_tape = teacher.with_tape(x_hat)
    s, s_tape = student.with_tape(x_hat)

    ce, d_ce = loss_ce_and_grad(t, y)
    div, d_t_div, d_s_div = _div_terms(t, s)
    bn, inject = _bn_terms(teacher, t_tape, lambda_bn)

    _, dx_t = backward(teacher.spec, teacher.params, t_tape, d_ce + lambda_div * d_t_div,
                       bn_input_grads=inject, input_only=True)
    _, dx_s = backward(student.spec, student.params, s_tape, lambda_div * d_s_div, input_only=True)
    comps = {"ce": ce, "div": div, "bn": bn, "total": ce + lambda_div * div + lambda_bn * bn}
    return comps, dx_t + dx_s
