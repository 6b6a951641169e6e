"""
services/strat_losses.py
--------------------------------
Purpose
-------
Client-side objectives of every strategy, each with one implementation that
returns the loss and its parameter gradient (StepOutput); the scalar helpers
simply read `.loss`.

Public API
----------
- finetune_step / finetune_loss
- lwf_step / lwf_loss          CE(x) + alpha * KL(teacher(x) || model(x))
- ewc_step / ewc_loss          CE + lambda/2 * sum F (theta - theta*)^2
- replay_step / replay_loss    CE on concat(real batch, exemplar batch)
- target_step / target_loss    CE(x) + alpha * KL(teacher(x_syn) || model(x_syn))

Notes
-----
- The trained model runs in `mode` (train by default); teachers always run in
  eval mode.
- The returned tape is the one whose BN running update the client commits:
  the real batch (or real+exemplar batch for replay). Synthetic forwards never
  move running statistics.
"""

from __future__ import annotations
from typing import Optional

import numpy as np

from services.nn_core import Batch, FrozenModel, backward, forward_with_tape, value_and_grad
from services.nn_losses import loss_ce_and_grad, loss_kl_and_grad
from services.nn_params import ParameterVector
from services.nn_spec import ModelSpec
from services.nn_train import StepOutput
from utils.exceptions import ShapeError


def _ce(out: np.ndarray, batch: Batch):
    return loss_ce_and_grad(out, batch.labels)


def finetune_step(spec: ModelSpec, params: ParameterVector, batch: Batch, mode: str = "train") -> StepOutput:
    res = value_and_grad(spec, params, _ce, batch, mode)
    return StepOutput(res.loss, res.grad, res.tape if mode == "train" else None)


def finetune_loss(spec: ModelSpec, params: ParameterVector, batch: Batch, mode: str = "train") -> float:
    return finetune_step(spec, params, batch, mode).loss


def lwf_step(
    spec: ModelSpec,
    params: ParameterVector,
    teacher: Optional[FrozenModel],
    batch: Batch,
    alpha: float,
    mode: str = "train",
) -> StepOutput:
    if teacher is None:
        raise ValueError("[strat_losses] FedLwF needs the frozen previous-task model as teacher")
    out, tape = forward_with_tape(spec, params, batch, mode)
    ce, d_ce = loss_ce_and_grad(out, batch.labels)
    kl, d_kl, _ = loss_kl_and_grad(teacher.logits(batch.inputs), out)
    g, _ = backward(spec, params, tape, d_ce + alpha * d_kl)
    return StepOutput(ce + alpha * kl, g, tape if mode == "train" else None)


def lwf_loss(spec, params, teacher, batch, alpha, mode: str = "train") -> float:
    return lwf_step(spec, params, teacher, batch, alpha, mode).loss


def ewc_penalty(params: ParameterVector, fisher, lam: float):
    """(value, gradient values) of lam/2 * sum F (theta - anchor)^2."""
    if fisher.values.shape != params.values.shape or not params.compatible(fisher.anchor):
        raise ShapeError("[strat_losses] Fisher diagonal layout does not match params")
    diff = params.values - fisher.anchor.values
    return 0.5 * lam * float(np.sum(fisher.values * diff * diff)), lam * fisher.values * diff


def ewc_step(spec: ModelSpec, params: ParameterVector, fisher, batch: Batch, lam: float, mode: str = "train") -> StepOutput:
    base = finetune_step(spec, params, batch, mode)
    if fisher is None:
        return base
    pen, g_pen = ewc_penalty(params, fisher, lam)
    return StepOutput(base.loss + pen, base.grad.with_values(base.grad.values + g_pen), base.tape)


def ewc_loss(spec, params, fisher, batch, lam, mode: str = "train") -> float:
    return ewc_step(spec, params, fisher, batch, lam, mode).loss


def replay_step(
    spec: ModelSpec, params: ParameterVector, batch: Batch, exemplar_batch: Optional[Batch], mode: str = "train"
) -> StepOutput:
    if exemplar_batch is None:
        return finetune_step(spec, params, batch, mode)
    joined = Batch(
        np.concatenate([batch.inputs, exemplar_batch.inputs]),
        np.concatenate([batch.labels, exemplar_batch.labels]),
    )
    return finetune_step(spec, params, joined, mode)


def replay_loss(spec, params, batch, exemplar_batch, mode: str = "train") -> float:
    return replay_step(spec, params, batch, exemplar_batch, mode).loss


def target_step(
    spec: ModelSpec,
    params: ParameterVector,
    teacher: Optional[FrozenModel],
    batch: Batch,
    synthetic_batch: Optional[np.ndarray],
    alpha: float,
    mode: str = "train",
) -> StepOutput:
    base = finetune_step(spec, params, batch, mode)
    if synthetic_batch is None:
        return base
    if teacher is None:
        raise ValueError("[strat_losses] TARGET distillation needs the frozen previous-task model")
    x_syn = np.asarray(synthetic_batch, dtype=np.float64)
    out, tape = forward_with_tape(spec, params, x_syn, mode)
    kl, d_kl, _ = loss_kl_and_grad(teacher.logits(x_syn), out)
    g_syn, _ = backward(spec, params, tape, alpha * d_kl)
    return StepOutput(base.loss + alpha * kl, base.grad.with_values(base.grad.values + g_syn.values), base.tape)


def target_loss(spec, params, teacher, batch, synthetic_batch, alpha, mode: str = "train") -> float:
    return target_step(spec, params, teacher, batch, synthetic_batch, alpha, mode).loss
