"""
services/exp_plotdata.py
--------------------------------
Purpose
-------
Tidy CSVs for downstream plotting; no rendering happens here.

Figures and columns
-------------------
- forgetting_curve : run_id, strategy, beta, seed, checkpoint, avg_acc, F, R
- task_matrix      : run_id, strategy, seed, task, checkpoint, acc        (task <= checkpoint)
- distill_trace    : run_id, seed, provenance, round, ce, div, bn, total,
                     synthetic_agreement, class_coverage, monitor_agreement, monitor_accuracy
- memory_size      : run_id, seed, provenance, round, memory_size, final_avg_acc
- old_new          : run_id, strategy, seed, checkpoint, old, new
- round_curve      : run_id, strategy, seed, task, round, seen_acc
- partition        : run_id, beta, seed, task, client, class, count, mean_entropy

Accuracies are fractions; checkpoints and tasks are 1-indexed as in the
metrics module, generation provenance and partition tasks are 0-indexed task ids.

Public API
----------
- FIGURES
- load_records(path) -> list[RunRecord]
- plot_frame(records, figure) -> DataFrame
- emit_plot_data(records, figure, out_dir) -> path
"""

from __future__ import annotations
from pathlib import Path
from typing import Callable, Dict, List, Sequence, Union

import numpy as np
import pandas as pd

from services import artifacts
from services.exp_runner import RunRecord
from utils.exceptions import ConfigError, PlotDataError
from utils.jsonsafe import nan_if_none


def _require(rec: RunRecord, name: str, present: bool) -> None:
    if not present:
        raise PlotDataError(name, rec.run_id)


def _forgetting_curve(records: Sequence[RunRecord]) -> List[dict]:
    rows = []
    for rec in records:
        _require(rec, "accuracy_log", rec.report is not None and len(rec.accuracy_log) > 0)
        rep = rec.report
        for k in range(1, len(rep.average_accuracy) + 1):
            rows.append({"run_id": rec.run_id, "strategy": rec.strategy, "beta": rec.beta, "seed": rec.seed,
                         "checkpoint": k, "avg_acc": rep.average_accuracy[k - 1],
                         "F": nan_if_none(rep.forgetting.get(k)), "R": nan_if_none(rep.relative.get(k))})
    return rows


def _task_matrix(records: Sequence[RunRecord]) -> List[dict]:
    rows = []
    for rec in records:
        _require(rec, "accuracy_log", rec.report is not None and len(rec.accuracy_log) > 0)
        m = rec.report.task_matrix
        for k in range(1, m.shape[1] + 1):
            for j in range(1, k + 1):
                rows.append({"run_id": rec.run_id, "strategy": rec.strategy, "seed": rec.seed,
                             "task": j, "checkpoint": k, "acc": float(m[j - 1, k - 1])})
    return rows


def _distill_trace(records: Sequence[RunRecord]) -> List[dict]:
    rows = []
    for rec in records:
        _require(rec, "inversion_reports", bool(rec.inversion_reports))
        for rep in rec.inversion_reports:
            n = rep.rounds_completed
            monitor_a = rep.monitor_agreement or [None] * n
            monitor_acc = rep.monitor_accuracy or [None] * n
            coverage = rep.class_coverage or [None] * n
            for r in range(n):
                rows.append({"run_id": rec.run_id, "seed": rec.seed, "provenance": rep.provenance, "round": r,
                             "ce": nan_if_none(rep.ce[r]), "div": nan_if_none(rep.div[r]), "bn": nan_if_none(rep.bn[r]),
                             "total": nan_if_none(rep.total[r]),
                             "synthetic_agreement": nan_if_none(rep.synthetic_agreement[r]),
                             "class_coverage": nan_if_none(coverage[r]),
                             "monitor_agreement": nan_if_none(monitor_a[r]), "monitor_accuracy": nan_if_none(monitor_acc[r])})
    return rows


def _memory_size(records: Sequence[RunRecord]) -> List[dict]:
    rows = []
    for rec in records:
        _require(rec, "inversion_reports", bool(rec.inversion_reports))
        final = rec.report.average_accuracy[-1] if rec.report is not None and rec.report.average_accuracy else np.nan
        for rep in rec.inversion_reports:
            for r, size in enumerate(rep.memory_size):
                rows.append({"run_id": rec.run_id, "seed": rec.seed, "provenance": rep.provenance, "round": r,
                             "memory_size": int(size), "final_avg_acc": final})
    return rows


def _old_new(records: Sequence[RunRecord]) -> List[dict]:
    rows = []
    for rec in records:
        _require(rec, "accuracy_log", rec.report is not None and len(rec.accuracy_log) > 0)
        for k, (old, new) in enumerate(rec.report.old_new, start=1):
            rows.append({"run_id": rec.run_id, "strategy": rec.strategy, "seed": rec.seed,
                         "checkpoint": k, "old": old, "new": new})
    return rows


def _round_curve(records: Sequence[RunRecord]) -> List[dict]:
    rows = []
    for rec in records:
        _require(rec, "round_curve", bool(rec.round_curve))
        for task in sorted(rec.round_curve):
            for r, acc in enumerate(rec.round_curve[task]):
                rows.append({"run_id": rec.run_id, "strategy": rec.strategy, "seed": rec.seed,
                             "task": task, "round": r, "seen_acc": nan_if_none(acc)})
    return rows


def _partition(records: Sequence[RunRecord]) -> List[dict]:
    rows = []
    for rec in records:
        _require(rec, "partition_stats", bool(rec.partition_stats))
        for st in rec.partition_stats:
            for client, counts in enumerate(st["histogram"]):
                for cls, count in zip(st["classes"], counts):
                    rows.append({"run_id": rec.run_id, "beta": rec.beta, "seed": rec.seed, "task": st["task"],
                                 "client": client, "class": cls, "count": int(count),
                                 "mean_entropy": float(st["mean_entropy"])})
    return rows


FIGURES: Dict[str, Callable[[Sequence[RunRecord]], List[dict]]] = {
    "forgetting_curve": _forgetting_curve,
    "task_matrix": _task_matrix,
    "distill_trace": _distill_trace,
    "memory_size": _memory_size,
    "old_new": _old_new,
    "round_curve": _round_curve,
    "partition": _partition,
}


def load_records(path: Union[str, Path]) -> List[RunRecord]:
    """A run folder, a run_record.json, or a folder of run folders (sorted by name)."""
    p = Path(path)
    if p.is_file() or (p / artifacts.RECORD_NAME).exists():
        return [RunRecord.from_dict(artifacts.load_run_record(p))]
    if not p.is_dir():
        raise ConfigError(f"[exp_plotdata] records path not found: {p}")
    found = sorted(d for d in p.iterdir() if (d / artifacts.RECORD_NAME).exists())
    if not found:
        raise ConfigError(f"[exp_plotdata] no {artifacts.RECORD_NAME} under {p}")
    return [RunRecord.from_dict(artifacts.load_run_record(d)) for d in found]


def plot_frame(records: Sequence[RunRecord], figure: str) -> pd.DataFrame:
    if figure not in FIGURES:
        raise ConfigError(f"[exp_plotdata] unknown figure '{figure}'. Allowed: {sorted(FIGURES)}")
    if not records:
        raise PlotDataError("records")
    return pd.DataFrame(FIGURES[figure](records)).round(6)


def emit_plot_data(records: Sequence[RunRecord], figure: str, out_dir: Union[str, Path]) -> str:
    return artifacts.write_plot_csv(plot_frame(records, figure), figure, out_dir)["path"]
