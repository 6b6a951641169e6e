"""
services/nn_train.py
--------------------------------
Mini-batch SGD loop shared by federated clients and the centralized trainer.

Public API
----------
- OptimConfig(lr, momentum, weight_decay)
- iterate_minibatches(indices, batch_size, rng)
- local_sgd(spec, params, dataset, indices, epochs, batch_size, optim, step_fn, rng) -> (params, epoch_losses)
- train_centralized(spec, params, dataset, steps, batch_size, lr, rng, ...) -> (params, losses)
- ce_step(spec, params, batch) -> StepOutput
"""

from __future__ import annotations
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Tuple

import numpy as np

from services.data_core import LabeledDataset
from services.nn_core import Batch, Tape, apply_running_stats, value_and_grad
from services.nn_losses import loss_ce_and_grad
from services.nn_optim import SGDState, sgd_step
from services.nn_params import ParameterVector
from services.nn_spec import ModelSpec


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4


@dataclass
class StepOutput:
    loss: float
    grad: ParameterVector
    tape: Optional[Tape]     # train-mode tape whose BN running update is committed


StepFn = Callable[[ModelSpec, ParameterVector, Batch], StepOutput]


def iterate_minibatches(indices: np.ndarray, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """One shuffled pass; the last batch may be smaller."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        return
    perm = rng.permutation(idx)
    for start in range(0, perm.size, batch_size):
        yield perm[start:start + batch_size]


def ce_step(spec: ModelSpec, params: ParameterVector, batch: Batch) -> StepOutput:
    res = value_and_grad(spec, params, lambda out, b: loss_ce_and_grad(out, b.labels), batch, "train")
    return StepOutput(res.loss, res.grad, res.tape)


def _apply(params: ParameterVector, out: StepOutput, optim: OptimConfig, state: SGDState) -> Tuple[ParameterVector, SGDState]:
    if out.tape is not None:
        params = apply_running_stats(params, out.tape)
    return sgd_step(params, out.grad, optim.lr, optim.momentum, optim.weight_decay, state)


def local_sgd(
    spec: ModelSpec,
    params: ParameterVector,
    dataset: LabeledDataset,
    indices: np.ndarray,
    epochs: int,
    batch_size: int,
    optim: OptimConfig,
    step_fn: StepFn,
    rng: np.random.Generator,
    *,
    max_steps: Optional[int] = None,
) -> Tuple[ParameterVector, List[float]]:
    """Returns the trained params and the mean loss of every completed epoch."""
    state = SGDState()
    epoch_losses: List[float] = []
    steps = 0
    for _ in range(int(epochs)):
        losses: List[float] = []
        for idx in iterate_minibatches(indices, batch_size, rng):
            out = step_fn(spec, params, dataset.batch(idx))
            params, state = _apply(params, out, optim, state)
            losses.append(out.loss)
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        if losses:
            epoch_losses.append(float(np.mean(losses)))
        if max_steps is not None and steps >= max_steps:
            break
    return params, epoch_losses


def train_centralized(
    spec: ModelSpec,
    params: ParameterVector,
    dataset: LabeledDataset,
    steps: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
    *,
    momentum: float = 0.9,
    weight_decay: float = 5e-4,
    indices: Optional[np.ndarray] = None,
) -> Tuple[ParameterVector, List[float]]:
    """Plain CE training for `steps` mini-batch steps over (a subset of) the dataset."""
    idx = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    if steps <= 0 or idx.size == 0:
        return params.copy(), []
    per_epoch = -(-idx.size // batch_size)
    epochs = -(-steps // per_epoch)
    return local_sgd(
        spec, params, dataset, idx, epochs, batch_size,
        OptimConfig(lr, momentum, weight_decay), ce_step, rng, max_steps=steps,
    )
