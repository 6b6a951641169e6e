"""
services/metrics_core.py
--------------------------------
Purpose
-------
Per-class evaluation and the forgetting measures computed from it.

Public API
----------
- evaluate(spec, params, test_set, classes) -> {class: accuracy or NaN}
- AccuracyLog (one checkpoint per completed task, 1-indexed)
- task_accuracy / average_accuracy / forgetting_measure / relative_forgetting
- build_report(log, clamp) -> MetricsReport ; report_rows(report, meta) -> DataFrame
- mean_over_defined(values) -> (mean, n_undefined)

Definitions (checkpoints k and tasks j are 1-indexed)
-----------------------------------------------------
    A(j, k) = mean_{c in C_j} A_c(k)
    Acc_k   = mean_{j <= k} A(j, k)
    f_j^k   = mean_{c in C_j} [max_{t in j..k-1} A_c(t) - A_c(k)]   (per-class clamp at 0 when clamp=True)
    F_k     = mean_{j < k} f_j^k
    R_k     = sum_{j < k} f_j^k / sum_{j < k} A(j, k)                (undefined when the sum is 0)

Notes
-----
- Accuracies are fractions. Undefined classes (no test samples) are NaN and
  dropped from every mean.
- CSV rows print Acc in percent and F/R as fractions, fixed precision.
- Aggregates across runs drop undefined R values and report how many were
  dropped (mean_over_defined); an all-undefined group has mean NaN.
"""

from __future__ import annotations
import json
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.metrics import recall_score

from services.data_core import LabeledDataset, TaskSplit
from services.nn_core import predict
from services.nn_params import ParameterVector
from services.nn_spec import ModelSpec
from utils.logging import log_event

METRIC_COLUMNS = ["run_id", "seed", "strategy", "beta", "num_tasks", "checkpoint", "avg_acc", "F", "R", "per_task_acc"]


def evaluate(
    spec: ModelSpec, params: ParameterVector, test_set: LabeledDataset, classes: Sequence[int]
) -> Dict[int, float]:
    """Fraction of each class's test samples whose argmax over the full head is that class."""
    cls = [int(c) for c in classes]
    idx = test_set.indices_of(cls)
    out: Dict[int, float] = {c: float("nan") for c in cls}
    if idx.size:
        y_true = test_set.labels[idx]
        y_pred = predict(spec, params, test_set.inputs[idx])
        rec = recall_score(y_true, y_pred, labels=cls, average=None, zero_division=np.nan)
        out = {c: float(v) for c, v in zip(cls, rec)}
    missing = [c for c in cls if test_set.class_index.get(c, np.zeros(0)).size == 0]
    if missing:
        log_event(stage="metrics", event="undefined_class_accuracy", level="WARNING",
                  details={"classes": missing})
        for c in missing:
            out[c] = float("nan")
    return out


@dataclass
class AccuracyLog:
    split: TaskSplit
    checkpoints: List[Dict[int, float]] = field(default_factory=list)

    def append(self, per_class: Mapping[int, float]) -> None:
        k = len(self.checkpoints) + 1
        if k > self.split.num_tasks:
            raise ValueError(f"[metrics_core] log already holds {self.split.num_tasks} checkpoints")
        expected = set(self.split.seen_classes(k - 1))
        got = {int(c) for c in per_class}
        if got != expected:
            raise ValueError(f"[metrics_core] checkpoint {k} must cover classes {sorted(expected)}, got {sorted(got)}")
        row = {int(c): float(v) for c, v in per_class.items()}
        if any(not np.isnan(v) and not 0.0 <= v <= 1.0 for v in row.values()):
            raise ValueError("[metrics_core] accuracies must be fractions in [0, 1]")
        self.checkpoints.append(row)

    def __len__(self) -> int:
        return len(self.checkpoints)

    def class_acc(self, c: int, k: int) -> float:
        return self.checkpoints[k - 1].get(int(c), float("nan"))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "tasks": [list(t) for t in self.split.tasks],
            "order_seed": self.split.order_seed,
            "checkpoints": [{str(c): (None if np.isnan(v) else v) for c, v in row.items()} for row in self.checkpoints],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "AccuracyLog":
        split = TaskSplit(tuple(tuple(int(c) for c in t) for t in d["tasks"]), int(d.get("order_seed", 0)))
        log = cls(split)
        for row in d.get("checkpoints", []):
            log.append({int(c): (float("nan") if v is None else float(v)) for c, v in row.items()})
        return log


def _check_k(log: AccuracyLog, k: int) -> None:
    if not 1 <= k <= len(log):
        raise ValueError(f"[metrics_core] checkpoint {k} out of range 1..{len(log)}")


def _nanmean(values: Sequence[float]) -> float:
    arr = np.asarray([v for v in values if not np.isnan(v)], dtype=np.float64)
    return float(arr.mean()) if arr.size else float("nan")


def task_accuracy(log: AccuracyLog, j: int, k: int) -> float:
    """A(j, k): mean accuracy of task j's classes at checkpoint k (1-indexed, j <= k)."""
    _check_k(log, k)
    if not 1 <= j <= k:
        raise ValueError(f"[metrics_core] task {j} not evaluated at checkpoint {k}")
    return _nanmean([log.class_acc(c, k) for c in log.split.tasks[j - 1]])


def average_accuracy(log: AccuracyLog, k: int) -> float:
    _check_k(log, k)
    return _nanmean([task_accuracy(log, j, k) for j in range(1, k + 1)])


def _task_forgetting(log: AccuracyLog, j: int, k: int, clamp: bool) -> float:
    drops = []
    for c in log.split.tasks[j - 1]:
        history = [log.class_acc(c, t) for t in range(j, k)]
        history = [h for h in history if not np.isnan(h)]
        now = log.class_acc(c, k)
        if not history or np.isnan(now):
            continue
        d = max(history) - now
        drops.append(max(d, 0.0) if clamp else d)
    return float(np.mean(drops)) if drops else float("nan")


def _require_two(log: AccuracyLog, k: int) -> None:
    _check_k(log, k)
    if k < 2:
        raise ValueError("[metrics_core] forgetting is undefined before the second checkpoint")


def forgetting_measure(log: AccuracyLog, k: int, *, clamp: bool = True) -> float:
    _require_two(log, k)
    return _nanmean([_task_forgetting(log, j, k, clamp) for j in range(1, k)])


def relative_forgetting(log: AccuracyLog, k: int, *, clamp: bool = True) -> Optional[float]:
    """None when the remaining accuracy on old tasks is zero (total forgetting)."""
    _require_two(log, k)
    f = [_task_forgetting(log, j, k, clamp) for j in range(1, k)]
    a = [task_accuracy(log, j, k) for j in range(1, k)]
    num = float(np.nansum(f))
    den = float(np.nansum(a))
    if den <= 0:
        log_event(stage="metrics", event="undefined_relative_forgetting", level="WARNING",
                  details={"checkpoint": k, "forgetting_sum": num})
        return None
    return num / den


def mean_over_defined(values: Sequence[Optional[float]]) -> Tuple[float, int]:
    """Mean of the defined entries (None/NaN dropped) and the number dropped."""
    defined = [float(v) for v in values if v is not None and not np.isnan(v)]
    dropped = len(values) - len(defined)
    return (float(np.mean(defined)) if defined else float("nan")), dropped


@dataclass
class MetricsReport:
    average_accuracy: List[float]
    forgetting: Dict[int, float]
    relative: Dict[int, Optional[float]]
    task_matrix: np.ndarray                     # [j-1, k-1] = A(j, k); NaN above the diagonal
    old_new: List[Tuple[float, float]]          # per checkpoint: (mean A(j<k, k), A(k, k))

    def to_dict(self) -> Dict[str, Any]:
        def clean(v):
            return None if v is None or (isinstance(v, float) and np.isnan(v)) else v

        return {
            "average_accuracy": [clean(v) for v in self.average_accuracy],
            "forgetting": {str(k): clean(v) for k, v in self.forgetting.items()},
            "relative": {str(k): clean(v) for k, v in self.relative.items()},
            "task_matrix": [[clean(float(v)) for v in row] for row in self.task_matrix],
            "old_new": [[clean(o), clean(n)] for o, n in self.old_new],
        }


def build_report(log: AccuracyLog, *, clamp: bool = True) -> MetricsReport:
    n = len(log)
    matrix = np.full((n, n), np.nan)
    for k in range(1, n + 1):
        for j in range(1, k + 1):
            matrix[j - 1, k - 1] = task_accuracy(log, j, k)
    old_new = []
    for k in range(1, n + 1):
        old = _nanmean([matrix[j - 1, k - 1] for j in range(1, k)]) if k > 1 else float("nan")
        old_new.append((old, float(matrix[k - 1, k - 1])))
    return MetricsReport(
        average_accuracy=[average_accuracy(log, k) for k in range(1, n + 1)],
        forgetting={k: forgetting_measure(log, k, clamp=clamp) for k in range(2, n + 1)},
        relative={k: relative_forgetting(log, k, clamp=clamp) for k in range(2, n + 1)},
        task_matrix=matrix,
        old_new=old_new,
    )


def _pct(v: Optional[float]) -> str:
    return "" if v is None or np.isnan(v) else f"{100.0 * v:.2f}"


def _frac(v: Optional[float]) -> str:
    return "" if v is None or np.isnan(v) else f"{v:.4f}"


def report_rows(report: MetricsReport, meta: Mapping[str, Any]) -> pd.DataFrame:
    """One row per checkpoint; meta supplies run_id, seed, strategy, beta, num_tasks."""
    rows = []
    for k in range(1, len(report.average_accuracy) + 1):
        per_task = [_pct(report.task_matrix[j - 1, k - 1]) for j in range(1, k + 1)]
        rows.append({
            "run_id": meta.get("run_id", ""),
            "seed": meta.get("seed", ""),
            "strategy": meta.get("strategy", ""),
            "beta": str(meta.get("beta", "")),
            "num_tasks": meta.get("num_tasks", ""),
            "checkpoint": k,
            "avg_acc": _pct(report.average_accuracy[k - 1]),
            "F": _frac(report.forgetting.get(k)),
            "R": _frac(report.relative.get(k)),
            "per_task_acc": json.dumps(per_task),
        })
    return pd.DataFrame(rows, columns=METRIC_COLUMNS)


def seen_accuracy(per_class: Mapping[int, float]) -> float:
    """Mean per-class accuracy over whatever classes were evaluated."""
    return _nanmean(list(per_class.values()))
