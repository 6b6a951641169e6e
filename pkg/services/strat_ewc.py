"""
services/strat_ewc.py
--------------------------------
Empirical diagonal Fisher for federated EWC.

- ewc_fisher: mean over up to `num_batches` shuffled local batches of the
  squared CE gradient (eval mode), anchor = current params.
- aggregate_fisher: FedAvg-weighted mean of client diagonals.
- accumulate_fisher: running sum across tasks; the anchor moves to the newest
  global model.
"""

from __future__ import annotations
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from services.data_core import ClientShard, LabeledDataset
from services.nn_params import ParameterVector
from services.nn_spec import ModelSpec
from services.nn_train import iterate_minibatches
from services.strat_losses import finetune_step
from utils.exceptions import AggregationError


@dataclass
class FisherDiagonal:
    values: np.ndarray
    anchor: ParameterVector
    num_samples: int = 0


def ewc_fisher(
    spec: ModelSpec,
    params: ParameterVector,
    dataset: LabeledDataset,
    shard: ClientShard,
    num_batches: int,
    batch_size: int,
    rng: np.random.Generator,
) -> FisherDiagonal:
    acc = np.zeros(params.layout.size)
    used = 0
    if shard.size and num_batches > 0:
        for idx in iterate_minibatches(shard.indices, batch_size, rng):
            g = finetune_step(spec, params, dataset.batch(idx), mode="eval").grad.values
            acc += g * g
            used += 1
            if used >= num_batches:
                break
    values = acc / used if used else acc
    return FisherDiagonal(values, params.copy(), shard.size)


def aggregate_fisher(diagonals: Sequence[FisherDiagonal], anchor: ParameterVector) -> FisherDiagonal:
    if not diagonals:
        raise AggregationError("[strat_ewc] no client Fisher diagonals to aggregate")
    counts = np.array([d.num_samples for d in diagonals], dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        return FisherDiagonal(np.zeros_like(diagonals[0].values), anchor.copy(), 0)
    values = np.tensordot(counts / total, np.stack([d.values for d in diagonals]), axes=1)
    return FisherDiagonal(values, anchor.copy(), int(total))


def accumulate_fisher(previous: Optional[FisherDiagonal], new: FisherDiagonal) -> FisherDiagonal:
    if previous is None:
        return new
    return FisherDiagonal(previous.values + new.values, new.anchor, previous.num_samples + new.num_samples)
