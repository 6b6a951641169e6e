"""
services/strat_registry.py
--------------------------------
Purpose
-------
Pluggable client-side strategies. Each strategy hands federation a per-client
step function for the current task and updates its own auxiliary state in an
end-of-task hook that runs on the orchestrator thread.

Public API
----------
- STRATEGIES (name -> class), build_strategy(name, **options)
- StepContext, TaskEndContext
- Finetune, FedLwF, FedEWC, Replay (local/global scope), Target

Notes
-----
- Task 0 reduces to plain CE for every strategy: there is no teacher, no
  Fisher, no exemplar and no synthetic memory yet.
- Auxiliary batches (exemplars, synthetic samples) are drawn from the client
  rng only when they enter the loss, so a vanished regularizer leaves the
  client's random stream exactly as Finetune would use it.
"""

from __future__ import annotations
import threading
from dataclasses import dataclass, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from services.data_core import ClientShard, LabeledDataset, TaskSplit
from services.inv_core import InversionConfig, InversionReport, SyntheticMemory, data_generation
from services.nn_core import Batch, FrozenModel
from services.nn_params import ParameterVector
from services.nn_spec import ModelSpec
from services.nn_train import StepFn, StepOutput
from services.strat_ewc import FisherDiagonal, accumulate_fisher, aggregate_fisher, ewc_fisher
from services.strat_exemplar import SCOPES, ExemplarStore, exemplar_update, pooled_shard
from services.strat_losses import ewc_step, finetune_step, lwf_step, replay_step, target_step
from utils.exceptions import ConfigError
from utils.logging import log_event
from utils.rng import named_rng

Monitor = Callable[[FrozenModel], Dict[str, float]]


@dataclass
class StepContext:
    task: int
    client_id: int
    rng: np.random.Generator
    teacher: Optional[FrozenModel] = None
    dataset: Optional[LabeledDataset] = None


@dataclass
class TaskEndContext:
    task: int
    spec: ModelSpec
    global_params: ParameterVector
    dataset: LabeledDataset
    shards: Sequence[ClientShard]
    split: TaskSplit
    seed: int
    batch_size: int
    is_last: bool = False
    monitor: Optional[Monitor] = None


class Strategy:
    name = "finetune"

    def step_fn(self, ctx: StepContext) -> StepFn:
        return lambda spec, params, batch: finetune_step(spec, params, batch)

    def end_of_task(self, ctx: TaskEndContext) -> None:
        return None

    def summary(self) -> Dict[str, Any]:
        return {"name": self.name}


class Finetune(Strategy):
    name = "finetune"


class FedLwF(Strategy):
    """Distills the frozen teacher on the real current-task batch."""

    name = "fedlwf"

    def __init__(self, alpha: float = 10.0) -> None:
        self.alpha = float(alpha)

    def step_fn(self, ctx: StepContext) -> StepFn:
        if ctx.task == 0 or self.alpha == 0.0:
            return super().step_fn(ctx)
        teacher = ctx.teacher
        return lambda spec, params, batch: lwf_step(spec, params, teacher, batch, self.alpha)

    def summary(self) -> Dict[str, Any]:
        return {"name": self.name, "alpha": self.alpha}


class FedEWC(Strategy):
    name = "fedewc"

    def __init__(self, lam: float = 100.0, fisher_batches: int = 10) -> None:
        self.lam = float(lam)
        self.fisher_batches = int(fisher_batches)
        self.fisher: Optional[FisherDiagonal] = None

    def step_fn(self, ctx: StepContext) -> StepFn:
        fisher = self.fisher
        if fisher is None or self.lam == 0.0:
            return super().step_fn(ctx)
        return lambda spec, params, batch: ewc_step(spec, params, fisher, batch, self.lam)

    def end_of_task(self, ctx: TaskEndContext) -> None:
        if ctx.is_last:
            return
        diagonals = [
            ewc_fisher(ctx.spec, ctx.global_params, ctx.dataset, shard, self.fisher_batches, ctx.batch_size,
                       named_rng(ctx.seed, f"ewc.{ctx.task}.{shard.client_id}"))
            for shard in ctx.shards
        ]
        merged = aggregate_fisher(diagonals, ctx.global_params)
        self.fisher = accumulate_fisher(self.fisher, merged)
        log_event(stage="strategies", event="fisher_updated",
                  details={"task": ctx.task, "mean_importance": float(self.fisher.values.mean())})

    def summary(self) -> Dict[str, Any]:
        return {"name": self.name, "lambda": self.lam, "fisher_batches": self.fisher_batches}


class Replay(Strategy):
    """Exemplar replay; local scope keeps one store per client, global scope shares one pooled store."""

    def __init__(self, scope: str = "local", budget: int = 20, global_budget: Optional[int] = None) -> None:
        if scope not in SCOPES:
            raise ConfigError(f"[strat_registry] replay scope must be one of {SCOPES}, got '{scope}'")
        self.scope = scope
        self.name = f"replay_{scope}"
        self.budget = int(budget)
        self.global_budget = global_budget
        self.stores: Dict[int, ExemplarStore] = {}
        self.shared = ExemplarStore(scope="global")
        self._warned: Set[Tuple[int, int]] = set()
        self._lock = threading.Lock()

    def store_for(self, client_id: int) -> ExemplarStore:
        if self.scope == "global":
            return self.shared
        return self.stores.get(client_id, ExemplarStore(scope="local"))

    def _warn_once(self, task: int, client_id: int) -> None:
        with self._lock:
            if (task, client_id) in self._warned:
                return
            self._warned.add((task, client_id))
        log_event(stage="strategies", event="replay_fallback", level="WARNING",
                  details={"task": task, "client": client_id, "scope": self.scope})

    def step_fn(self, ctx: StepContext) -> StepFn:
        store = self.store_for(ctx.client_id)
        if ctx.task == 0:
            return super().step_fn(ctx)
        if store.size == 0:
            self._warn_once(ctx.task, ctx.client_id)
            return super().step_fn(ctx)
        if ctx.dataset is None:
            raise ValueError("[strat_registry] replay needs the training dataset to read exemplars")
        rng, dataset = ctx.rng, ctx.dataset

        def step(spec: ModelSpec, params: ParameterVector, batch: Batch) -> StepOutput:
            exemplars = store.sample_batch(dataset, batch.size, rng)
            return replay_step(spec, params, batch, exemplars)

        return step

    def end_of_task(self, ctx: TaskEndContext) -> None:
        if ctx.is_last:
            return
        if self.scope == "global":
            budget = self.global_budget if self.global_budget is not None else self.budget * len(ctx.shards)
            self.shared = exemplar_update(self.shared, pooled_shard(ctx.shards, ctx.task), ctx.dataset, budget,
                                          "global", named_rng(ctx.seed, f"exemplar.{ctx.task}"))
            sizes = {"global": self.shared.size}
        else:
            for shard in ctx.shards:
                self.stores[shard.client_id] = exemplar_update(
                    self.store_for(shard.client_id), shard, ctx.dataset, self.budget, "local",
                    named_rng(ctx.seed, f"exemplar.{ctx.task}.{shard.client_id}"),
                )
            sizes = {str(k): s.size for k, s in sorted(self.stores.items())}
        log_event(stage="strategies", event="exemplars_updated", details={"task": ctx.task, "sizes": sizes})

    def summary(self) -> Dict[str, Any]:
        return {"name": self.name, "budget": self.budget, "global_budget": self.global_budget}


class Target(Strategy):
    """
    CE on real data plus alpha * KL(teacher(x_syn) || model(x_syn)), where x_syn
    comes from the server-side synthetic memory of the previous task.
    """

    name = "target"

    def __init__(
        self,
        alpha: float = 10.0,
        inversion: Optional[InversionConfig] = None,
        capacity_per_class: Optional[int] = 40,
    ) -> None:
        self.alpha = float(alpha)
        self.inversion = inversion or InversionConfig()
        self.capacity_per_class = None if capacity_per_class is None else int(capacity_per_class)
        self.memory: Optional[SyntheticMemory] = None
        self.reports: List[InversionReport] = []
        self.memories: List[SyntheticMemory] = []

    def config_for(self, task: int, num_trained: int) -> InversionConfig:
        """Capacity scales with the trained classes unless a fixed capacity was configured."""
        if self.capacity_per_class is None:
            return replace(self.inversion, provenance=task)
        cap = max(self.capacity_per_class * num_trained, int(self.inversion.batch_size))
        return replace(self.inversion, capacity=cap, provenance=task)

    def step_fn(self, ctx: StepContext) -> StepFn:
        if ctx.task == 0 or self.alpha == 0.0:
            return super().step_fn(ctx)
        if self.memory is None:
            raise ValueError("[strat_registry] TARGET needs the previous task's synthetic memory on task >= 1")
        memory, teacher, rng = self.memory, ctx.teacher, ctx.rng
        if memory.size == 0:
            return super().step_fn(ctx)

        def step(spec: ModelSpec, params: ParameterVector, batch: Batch) -> StepOutput:
            return target_step(spec, params, teacher, batch, memory.draw(batch.size, rng), self.alpha)

        return step

    def end_of_task(self, ctx: TaskEndContext) -> None:
        if ctx.is_last:
            return
        trained = ctx.split.seen_classes(ctx.task)
        config = self.config_for(ctx.task, len(trained))
        teacher = FrozenModel(ctx.spec, ctx.global_params)
        memory, report = data_generation(
            teacher, trained, config, named_rng(ctx.seed, f"generator.{ctx.task}"), ctx.monitor,
            value_range=ctx.dataset.value_range,
        )
        # replaces, never accumulates across tasks
        self.memory = memory
        self.memories.append(memory)
        self.reports.append(report)
        log_event(stage="inversion", event="memory_ready",
                  details={"task": ctx.task, "size": memory.size, "capacity": memory.capacity,
                           "rounds": report.rounds_completed})

    def summary(self) -> Dict[str, Any]:
        return {"name": self.name, "alpha": self.alpha, "capacity_per_class": self.capacity_per_class}


STRATEGIES = {
    "finetune": Finetune,
    "fedlwf": FedLwF,
    "fedewc": FedEWC,
    "replay_local": Replay,
    "replay_global": Replay,
    "target": Target,
}


def build_strategy(name: str, **options: Any) -> Strategy:
    key = str(name).strip().lower()
    if key not in STRATEGIES:
        raise ConfigError(f"[strat_registry] unknown strategy '{name}'. Allowed: {sorted(STRATEGIES)}")
    if key.startswith("replay_"):
        options = {**options, "scope": key.split("_", 1)[1]}
    return STRATEGIES[key](**options)
