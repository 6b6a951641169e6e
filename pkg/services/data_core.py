"""
services/data_core.py
--------------------------------
Purpose
-------
In-memory dataset types shared by generation, IDX I/O, partitioning and
evaluation.

Public API
----------
- LabeledDataset(inputs, labels, num_classes, value_range)
- TaskSplit(tasks, order_seed)
- ClientShard(client_id, task_id, indices)
- holdout_split(dataset, test_fraction, rng) -> (train, test)

Notes
-----
- inputs are float64 N x C x H x W; labels int64 in [0, num_classes).
- class_index maps every class id (also empty ones) to ascending sample indices.
"""

from __future__ import annotations
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Tuple

import numpy as np

from services.nn_core import Batch
from utils.exceptions import DataError, PartitionError


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    value_range: Tuple[float, float] = (0.0, 1.0)
    class_index: Dict[int, np.ndarray] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.inputs.ndim != 4:
            raise DataError(f"[data_core] inputs must be N x C x H x W, got {self.inputs.shape}")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise DataError(f"[data_core] {self.inputs.shape[0]} inputs vs {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"[data_core] labels must lie in [0, {self.num_classes})")
        self.class_index = {c: np.flatnonzero(self.labels == c) for c in range(int(self.num_classes))}

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return tuple(self.inputs.shape[1:])  # type: ignore[return-value]

    def subset(self, indices: np.ndarray) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.num_classes, self.value_range)

    def batch(self, indices: np.ndarray) -> Batch:
        idx = np.asarray(indices, dtype=np.int64)
        return Batch(self.inputs[idx], self.labels[idx])

    def indices_of(self, classes: Iterable[int]) -> np.ndarray:
        parts = [self.class_index.get(int(c), np.zeros(0, dtype=np.int64)) for c in classes]
        return np.sort(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)


@dataclass(frozen=True)
class TaskSplit:
    tasks: Tuple[Tuple[int, ...], ...]
    order_seed: int

    def __post_init__(self) -> None:
        seen: set = set()
        for t in self.tasks:
            if seen.intersection(t):
                raise PartitionError("[data_core] task class sets must be disjoint")
            seen.update(t)

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def seen_classes(self, k: int) -> List[int]:
        """Classes of tasks 0..k (0-indexed), in task order."""
        return [c for t in self.tasks[: k + 1] for c in t]


@dataclass
class ClientShard:
    client_id: int
    task_id: int
    indices: np.ndarray

    def __post_init__(self) -> None:
        self.indices = np.asarray(self.indices, dtype=np.int64)

    @property
    def size(self) -> int:
        return int(self.indices.size)


def holdout_split(
    dataset: LabeledDataset, test_fraction: float, rng: np.random.Generator
) -> Tuple[LabeledDataset, LabeledDataset]:
    """Seeded per-class holdout: round(test_fraction * n_c) samples of each class go to the test set."""
    if not 0.0 <= test_fraction < 1.0:
        raise DataError(f"[data_core] test_fraction must be in [0, 1), got {test_fraction}")
    train_parts: List[np.ndarray] = []
    test_parts: List[np.ndarray] = []
    for c in range(dataset.num_classes):
        idx = rng.permutation(dataset.class_index[c])
        n_test = int(round(test_fraction * idx.size))
        test_parts.append(idx[:n_test])
        train_parts.append(idx[n_test:])
    train_idx = np.sort(np.concatenate(train_parts))
    test_idx = np.sort(np.concatenate(test_parts))
    return dataset.subset(train_idx), dataset.subset(test_idx)
