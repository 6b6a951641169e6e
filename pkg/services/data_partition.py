"""
services/data_partition.py
--------------------------------
Purpose
-------
Class-incremental task splits and per-task client partitions (IID or
Dirichlet label skew), plus label-skew diagnostics.

Public API
----------
- split_tasks(num_classes, num_tasks, seed) -> TaskSplit
- dirichlet_partition(dataset, task_classes, num_clients, beta, seed, task_id=0) -> list[ClientShard]
- label_histogram(dataset, shards, classes) -> clients x classes counts
- mean_label_entropy(histogram) -> float

Notes
-----
- Dirichlet draws are per class, in ascending class order: p ~ Dir(beta * 1),
  then a permutation of the class's samples; counts use largest-remainder
  rounding (stable tie-break on client id).
- The partition stream is `partition.<task_id>` derived from `seed`.
"""

from __future__ import annotations
from typing import List, Sequence, Union

import numpy as np
from scipy.stats import entropy

from services.data_core import ClientShard, LabeledDataset, TaskSplit
from utils.exceptions import PartitionError
from utils.logging import log_event
from utils.rng import named_rng

Beta = Union[float, str]


def split_tasks(num_classes: Union[int, LabeledDataset], num_tasks: int, seed: int) -> TaskSplit:
    k = num_classes.num_classes if isinstance(num_classes, LabeledDataset) else int(num_classes)
    if num_tasks < 1 or num_tasks > k:
        raise PartitionError(f"[data_partition] num_tasks must be in [1, {k}], got {num_tasks}")
    if k % num_tasks:
        raise PartitionError(f"[data_partition] {k} classes do not divide evenly into {num_tasks} tasks")
    order = named_rng(seed, "split").permutation(k)
    size = k // num_tasks
    tasks = tuple(tuple(int(c) for c in order[i * size:(i + 1) * size]) for i in range(num_tasks))
    return TaskSplit(tasks, int(seed))


def is_iid(beta: Beta) -> bool:
    return isinstance(beta, str) and beta.strip().lower() == "iid"


def largest_remainder(proportions: np.ndarray, n: int) -> np.ndarray:
    raw = proportions * n
    counts = np.floor(raw).astype(np.int64)
    rem = int(n - counts.sum())
    if rem > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:rem]] += 1
    return counts


def dirichlet_partition(
    dataset: LabeledDataset,
    task_classes: Sequence[int],
    num_clients: int,
    beta: Beta,
    seed: int,
    task_id: int = 0,
) -> List[ClientShard]:
    if num_clients < 1:
        raise PartitionError(f"[data_partition] num_clients must be >= 1, got {num_clients}")
    iid = is_iid(beta)
    if not iid and not float(beta) > 0:
        raise PartitionError(f"[data_partition] beta must be > 0 or 'iid', got {beta}")

    parts: List[List[np.ndarray]] = [[] for _ in range(num_clients)]
    rng = named_rng(seed, f"partition.{task_id}")
    for c in sorted(int(c) for c in task_classes):
        idx = dataset.class_index[c]
        if num_clients == 1:
            parts[0].append(idx)
            continue
        if iid:
            perm = rng.permutation(idx)
            for k in range(num_clients):
                parts[k].append(perm[k::num_clients])
            continue
        p = rng.dirichlet(np.full(num_clients, float(beta)))
        if not np.all(np.isfinite(p)):
            raise PartitionError(f"[data_partition] Dirichlet draw is not finite for beta={beta}")
        perm = rng.permutation(idx)
        bounds = np.concatenate([[0], np.cumsum(largest_remainder(p, idx.size))])
        for k in range(num_clients):
            parts[k].append(perm[bounds[k]:bounds[k + 1]])

    shards = []
    for k in range(num_clients):
        ind = np.sort(np.concatenate(parts[k])) if parts[k] else np.zeros(0, dtype=np.int64)
        shards.append(ClientShard(k, task_id, ind))
        if ind.size == 0:
            log_event(stage="data", event="empty_shard", level="WARNING",
                      details={"task": task_id, "client": k, "beta": str(beta)})
    return shards


def label_histogram(dataset: LabeledDataset, shards: Sequence[ClientShard], classes: Sequence[int]) -> np.ndarray:
    cls = list(classes)
    pos = {c: i for i, c in enumerate(cls)}
    hist = np.zeros((len(shards), len(cls)), dtype=np.int64)
    for r, shard in enumerate(shards):
        for y in dataset.labels[shard.indices]:
            hist[r, pos[int(y)]] += 1
    return hist


def mean_label_entropy(histogram: np.ndarray) -> float:
    """Mean Shannon entropy (nats) of each non-empty client's label distribution."""
    rows = [row for row in np.asarray(histogram) if row.sum() > 0]
    if not rows:
        return 0.0
    return float(np.mean([entropy(row) for row in rows]))
