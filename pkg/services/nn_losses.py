"""
services/nn_losses.py
--------------------------------
Cross-entropy and KL divergence on logits, with gradients.

Public API
----------
- loss_ce(logits, labels) / loss_ce_and_grad
- loss_kl(teacher_logits, student_logits) / loss_kl_and_grad
- kl_rows(teacher_logits, student_logits)

Notes
-----
- softmax/log_softmax come from scipy.special (max-subtracted, shift invariant).
- log-probabilities are floored at log(1e-12).
"""

from __future__ import annotations
from typing import Tuple

import numpy as np
from scipy.special import log_softmax, softmax

from utils.constants import LOG_FLOOR
from utils.exceptions import ShapeError

_LOG_FLOOR = float(np.log(LOG_FLOOR))


def log_probs(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax floored at log(1e-12)."""
    return np.maximum(log_softmax(logits, axis=1), _LOG_FLOOR)


def _check_labels(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    if labels is None:
        raise ShapeError("[nn_losses] cross-entropy needs labels")
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or y.shape[0] != logits.shape[0]:
        raise ShapeError(f"[nn_losses] logits {logits.shape} vs labels {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= logits.shape[1]):
        raise ValueError(f"[nn_losses] label out of range [0, {logits.shape[1]}): {sorted(set(y.tolist()))}")
    return y


def loss_ce(logits: np.ndarray, labels: np.ndarray) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    y = _check_labels(logits, labels)
    return float(-log_probs(logits)[np.arange(y.size), y].mean())


def loss_ce_and_grad(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    y = _check_labels(logits, labels)
    n = y.size
    p = softmax(logits, axis=1)
    loss = float(-log_probs(logits)[np.arange(n), y].mean())
    g = p.copy()
    g[np.arange(n), y] -= 1.0
    return loss, g / n


def _check_pair(t: np.ndarray, s: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    t = np.asarray(t, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if t.shape != s.shape or t.ndim != 2:
        raise ShapeError(f"[nn_losses] KL needs equal 2-D shapes, got {t.shape} vs {s.shape}")
    return t, s


def kl_rows(teacher_logits: np.ndarray, student_logits: np.ndarray) -> np.ndarray:
    """Per-sample KL(softmax(teacher) || softmax(student))."""
    t, s = _check_pair(teacher_logits, student_logits)
    p = softmax(t, axis=1)
    return (p * (log_probs(t) - log_probs(s))).sum(axis=1)


def loss_kl(teacher_logits: np.ndarray, student_logits: np.ndarray) -> float:
    return float(kl_rows(teacher_logits, student_logits).mean())


def loss_kl_and_grad(
    teacher_logits: np.ndarray, student_logits: np.ndarray
) -> Tuple[float, np.ndarray, np.ndarray]:
    """Returns (loss, d/d student_logits, d/d teacher_logits)."""
    t, s = _check_pair(teacher_logits, student_logits)
    n = t.shape[0]
    p, q = softmax(t, axis=1), softmax(s, axis=1)
    logp, logq = log_probs(t), log_probs(s)
    rows = (p * (logp - logq)).sum(axis=1)
    d_student = (q - p) / n
    d_teacher = p * (logp - logq - rows[:, None]) / n
    return float(rows.mean()), d_student, d_teacher
