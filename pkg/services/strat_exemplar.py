"""
services/strat_exemplar.py
--------------------------------
Real-sample exemplar memory for the replay baselines.

Selection is random without replacement (no herding), up to the per-class
budget, class by class in ascending order. Local scope keeps one store per
client built only from that client's shards; global scope pools every
client's current-task samples on the server and shares one store.
"""

from __future__ import annotations
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from services.data_core import ClientShard, LabeledDataset
from services.nn_core import Batch

SCOPES = ("local", "global")


@dataclass
class ExemplarStore:
    scope: str = "local"
    per_class: Dict[int, np.ndarray] = field(default_factory=dict)  # class -> dataset indices

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self.per_class.values()))

    def indices(self) -> np.ndarray:
        if not self.per_class:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([self.per_class[c] for c in sorted(self.per_class)])

    def sample_batch(self, dataset: LabeledDataset, batch_size: int, rng: np.random.Generator) -> Optional[Batch]:
        idx = self.indices()
        if idx.size == 0:
            return None
        pick = rng.choice(idx.size, size=batch_size, replace=idx.size < batch_size)
        return dataset.batch(idx[pick])


def exemplar_update(
    store: ExemplarStore,
    shard: ClientShard,
    dataset: LabeledDataset,
    budget_per_class: int,
    scope: str,
    rng: np.random.Generator,
) -> ExemplarStore:
    """New store = old store + up to `budget_per_class` random samples of every class in `shard`."""
    if scope not in SCOPES:
        raise ValueError(f"[strat_exemplar] scope must be one of {SCOPES}, got '{scope}'")
    out = ExemplarStore(scope, {c: v.copy() for c, v in store.per_class.items()})
    if budget_per_class <= 0 or shard.size == 0:
        return out
    labels = dataset.labels[shard.indices]
    for c in sorted(set(labels.tolist())):
        cands = shard.indices[labels == c]
        take = min(int(budget_per_class), cands.size)
        out.per_class[int(c)] = np.sort(rng.choice(cands, size=take, replace=False))
    return out


def pooled_shard(shards, task_id: int) -> ClientShard:
    """Server-side pool of all clients' current-task samples (global scope)."""
    parts = [s.indices for s in shards if s.size]
    idx = np.sort(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)
    return ClientShard(-1, task_id, idx)
