"""
services/fed_server.py
--------------------------------
Purpose
-------
The per-task server loop: freeze the teacher, (re)initialize the round loop,
then for every round sample clients, run their updates, aggregate with FedAvg
and optionally evaluate. The final global model is evaluated on every class
seen so far.

Public API
----------
- TaskOutcome
- round_teacher(state, config) -> FrozenModel or None
- run_task(state, task, strategy, dataset, shards, test_set, split, config) -> TaskOutcome

Notes
-----
- Client updates run sequentially or in a thread pool (`config.workers`);
  results are aggregated in ascending client-id order either way, and each
  client consumes only its own rng stream, so the final params are identical.
- A round in which every sampled client has an empty shard leaves the global
  model unchanged (logged as `empty_round`).
"""

from __future__ import annotations
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from services.data_core import ClientShard, LabeledDataset, TaskSplit
from services.fed_client import client_update
from services.fed_core import TEACHER_MODES, ClientUpdateResult, FedConfig, FederationState, aggregate, sample_clients
from services.metrics_core import evaluate, seen_accuracy
from services.nn_core import FrozenModel
from services.nn_params import init_params
from services.strat_registry import Strategy
from utils.exceptions import ConfigError
from utils.logging import log_event
from utils.rng import named_rng


@dataclass
class TaskOutcome:
    task: int
    per_class: Dict[int, float]
    round_losses: List[float] = field(default_factory=list)     # mean final-epoch client loss per round
    round_curve: List[float] = field(default_factory=list)      # seen-class accuracy per round (when enabled)
    sampled: List[List[int]] = field(default_factory=list)


def round_teacher(state: FederationState, config: FedConfig) -> Optional[FrozenModel]:
    if config.teacher not in TEACHER_MODES:
        raise ConfigError(f"[fed_server] teacher must be one of {TEACHER_MODES}, got '{config.teacher}'")
    if state.task == 0:
        return None
    if config.teacher == "per_round":
        return FrozenModel(state.spec, state.global_params)
    return FrozenModel(state.spec, state.frozen_teacher) if state.frozen_teacher is not None else None


def _run_clients(
    state: FederationState,
    ids: Sequence[int],
    shards: Dict[int, ClientShard],
    dataset: LabeledDataset,
    strategy: Strategy,
    config: FedConfig,
    teacher: Optional[FrozenModel],
) -> List[ClientUpdateResult]:
    def one(cid: int) -> ClientUpdateResult:
        return client_update(state, shards[cid], dataset, strategy, config, teacher)

    if config.workers > 1 and len(ids) > 1:
        with ThreadPoolExecutor(max_workers=min(int(config.workers), len(ids))) as pool:
            results = list(pool.map(one, ids))
    else:
        results = [one(cid) for cid in ids]
    return sorted(results, key=lambda r: r.client_id)


def run_task(
    state: FederationState,
    task: int,
    strategy: Strategy,
    dataset: LabeledDataset,
    shards: Sequence[ClientShard],
    test_set: LabeledDataset,
    split: TaskSplit,
    config: FedConfig,
) -> TaskOutcome:
    if task > 0:
        state.frozen_teacher = state.global_params.copy()
        if not config.warm_start:
            state.global_params = init_params(state.spec, named_rng(state.seed, f"init.{task}"))
    state.task = int(task)
    state.round = 0

    by_id = {int(s.client_id): s for s in shards}
    num_clients = len(by_id)
    seen = split.seen_classes(task)
    outcome = TaskOutcome(task=task, per_class={})

    for r in range(int(config.rounds)):
        ids = sample_clients(num_clients, config.fraction, state.sampling_rng)
        teacher = round_teacher(state, config)
        results = _run_clients(state, ids, by_id, dataset, strategy, config, teacher)
        outcome.sampled.append(list(ids))

        if sum(res.num_samples for res in results) == 0:
            log_event(stage="federation", event="empty_round", level="WARNING",
                      details={"task": task, "round": r, "clients": list(ids)})
        else:
            state.global_params = aggregate(results)

        finals = [res.local_loss_trace[-1] for res in results if res.local_loss_trace]
        loss = float(np.mean(finals)) if finals else float("nan")
        outcome.round_losses.append(loss)
        details = {"task": task, "round": r, "clients": list(ids), "loss": loss}
        if config.eval_per_round:
            acc = seen_accuracy(evaluate(state.spec, state.global_params, test_set, seen))
            outcome.round_curve.append(acc)
            details["seen_acc"] = acc
        log_event(stage="federation", event="round_completed", details=details)
        state.round += 1

    outcome.per_class = evaluate(state.spec, state.global_params, test_set, seen)
    return outcome
