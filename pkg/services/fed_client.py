"""
services/fed_client.py
--------------------------------
ClientUpdate: copy the incoming global params, run E local epochs of the
strategy's step over the client's current-task shard, return the result.

The optimizer state (momentum buffer) starts fresh on every call; the learning
rate is the configured constant, so it is also "reset" at every new task.
"""

from __future__ import annotations
from typing import Optional

from services.data_core import ClientShard, LabeledDataset
from services.fed_core import ClientUpdateResult, FedConfig, FederationState
from services.nn_core import FrozenModel
from services.nn_train import OptimConfig, local_sgd
from services.strat_registry import StepContext, Strategy
from utils.logging import log_event


def client_update(
    state: FederationState,
    shard: ClientShard,
    dataset: LabeledDataset,
    strategy: Strategy,
    config: FedConfig,
    teacher: Optional[FrozenModel] = None,
) -> ClientUpdateResult:
    """An empty shard returns the untouched global params with num_samples = 0."""
    cid = int(shard.client_id)
    if shard.size == 0:
        log_event(stage="federation", event="empty_client_update", level="WARNING",
                  details={"task": state.task, "round": state.round, "client": cid})
        return ClientUpdateResult(cid, state.global_params.copy(), 0, [])

    rng = state.client_rngs[cid]
    ctx = StepContext(task=state.task, client_id=cid, rng=rng, teacher=teacher, dataset=dataset)
    params, losses = local_sgd(
        state.spec,
        state.global_params.copy(),
        dataset,
        shard.indices,
        config.epochs,
        config.batch_size,
        OptimConfig(config.lr, config.momentum, config.weight_decay),
        strategy.step_fn(ctx),
        rng,
    )
    return ClientUpdateResult(cid, params, shard.size, losses)
