"""
services/fed_core.py
--------------------------------
Purpose
-------
Federation state, client sampling and FedAvg aggregation.

Public API
----------
- FedConfig, FederationState, ClientUpdateResult
- new_federation_state(spec, params, seed, num_clients)
- sample_clients(num_clients, fraction, rng) -> sorted client ids
- aggregate(results) -> ParameterVector

Notes
-----
- Sampling is a partial Fisher-Yates shuffle: for i < m swap position i with
  rng.integers(i, n); the first m ids are returned in ascending order.
- Aggregation weights are n_k / sum(n); BN running stats use the same weights.
"""

from __future__ import annotations
from dataclasses import dataclass, field
from math import ceil
from typing import Dict, List, Optional, Sequence

import numpy as np

from services.nn_params import ParameterVector
from services.nn_spec import ModelSpec
from utils.exceptions import AggregationError, ConfigError
from utils.rng import client_rng, named_rng


TEACHER_MODES = ("frozen", "per_round")


@dataclass(frozen=True)
class FedConfig:
    rounds: int = 20
    fraction: float = 1.0
    epochs: int = 2
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warm_start: bool = True
    teacher: str = "frozen"          # frozen end-of-previous-task model, or the incoming per-round global
    workers: int = 1
    eval_per_round: bool = False


@dataclass
class FederationState:
    spec: ModelSpec
    global_params: ParameterVector
    seed: int
    round: int = 0
    task: int = 0
    frozen_teacher: Optional[ParameterVector] = None
    client_rngs: Dict[int, np.random.Generator] = field(default_factory=dict)
    sampling_rng: Optional[np.random.Generator] = None


@dataclass
class ClientUpdateResult:
    client_id: int
    params: ParameterVector
    num_samples: int
    local_loss_trace: List[float] = field(default_factory=list)


def new_federation_state(spec: ModelSpec, params: ParameterVector, seed: int, num_clients: int) -> FederationState:
    return FederationState(
        spec=spec,
        global_params=params,
        seed=int(seed),
        client_rngs={k: client_rng(seed, k) for k in range(int(num_clients))},
        sampling_rng=named_rng(seed, "sampling"),
    )


def sample_clients(num_clients: int, fraction: float, rng: np.random.Generator) -> List[int]:
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"[fed_core] fraction must be in (0, 1], got {fraction}")
    if num_clients < 1:
        raise ConfigError(f"[fed_core] num_clients must be >= 1, got {num_clients}")
    m = max(ceil(round(fraction * num_clients, 9)), 1)
    ids = list(range(num_clients))
    for i in range(m):
        j = int(rng.integers(i, num_clients))
        ids[i], ids[j] = ids[j], ids[i]
    return sorted(ids[:m])


def aggregate(results: Sequence[ClientUpdateResult]) -> ParameterVector:
    if not results:
        raise AggregationError("[fed_core] nothing to aggregate: no client results")
    ref = results[0].params
    for r in results[1:]:
        if not r.params.compatible(ref):
            raise AggregationError(f"[fed_core] client {r.client_id} returned a different parameter layout")
    counts = np.array([r.num_samples for r in results], dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise AggregationError("[fed_core] every client reported num_samples = 0")
    weights = counts / total
    values = np.tensordot(weights, np.stack([r.params.values for r in results]), axes=1)
    stats = {}
    for layer in ref.bn_stats:
        mean = np.tensordot(weights, np.stack([r.params.bn_stats[layer][0] for r in results]), axes=1)
        var = np.tensordot(weights, np.stack([r.params.bn_stats[layer][1] for r in results]), axes=1)
        stats[layer] = (mean, np.maximum(var, 0.0))
    return ParameterVector(values, ref.layout, stats)
