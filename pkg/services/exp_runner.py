"""
services/exp_runner.py
--------------------------------
Purpose
-------
Execute one full multi-task federated run and persist it.

Public API
----------
- RunRecord (to_dict / from_dict)
- build_datasets(config) -> (train, test)
- make_monitor(spec, teacher_params, test_set, classes) -> monitor callback
- resolve_run_id(config) -> str
- run(config, root=None) -> RunRecord

Flow
----
dataset -> holdout -> TaskSplit -> for each task: Dirichlet shards, run_task,
checkpoint evaluation, params artifact, end-of-task strategy hook (TARGET's
data generation happens here, except after the last task) -> metrics.

Notes
-----
- run_record.json is rewritten after every task with status "running"; a
  failure rewrites it with status "incomplete" and the error, then re-raises.
- metrics.csv holds only deterministic values, so repeated runs of the same
  (config, seed) are byte-identical. Timings live in run_record.json.
"""

from __future__ import annotations
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from constants import RECORD_VERSION
from services import artifacts
from services.data_core import LabeledDataset, TaskSplit, holdout_split
from services.data_idx import load_idx
from services.data_partition import dirichlet_partition, label_histogram, mean_label_entropy, split_tasks
from services.data_toy import generate_toy_dataset
from services.exp_config import ExperimentConfig, format_value, normalize_config, parse_config_text
from services.fed_core import new_federation_state
from services.fed_server import run_task
from services.inv_core import InversionReport
from services.metrics_core import AccuracyLog, MetricsReport, build_report, report_rows
from services.nn_core import FrozenModel, predict
from services.nn_params import ParameterVector, init_params
from services.nn_spec import ModelSpec, build_classifier_spec, layer_summary
from services.strat_registry import Target, TaskEndContext, build_strategy
from utils.exceptions import InversionAborted
from utils.jsonsafe import to_jsonable
from utils.logging import bind_run, bound_root, bound_run, log_event
from utils.naming import make_run_id
from utils.rng import named_rng
from utils.runtime import output_root
from utils.time import Stopwatch, now_utc_iso

STATUSES = ("running", "complete", "incomplete")


@dataclass
class RunRecord:
    run_id: str
    seed: int
    config: Dict[str, Any]
    split: TaskSplit
    accuracy_log: AccuracyLog
    status: str = "running"
    error: Optional[str] = None
    report: Optional[MetricsReport] = None
    round_losses: Dict[int, List[float]] = field(default_factory=dict)
    round_curve: Dict[int, List[float]] = field(default_factory=dict)
    inversion_reports: List[InversionReport] = field(default_factory=list)
    partition_stats: List[Dict[str, Any]] = field(default_factory=list)
    timings: Dict[str, float] = field(default_factory=dict)
    started_at: str = ""
    finished_at: str = ""

    @property
    def strategy(self) -> str:
        return str(self.config.get("strategy.name", ""))

    @property
    def beta(self) -> str:
        return str(self.config.get("partition.beta", ""))

    @property
    def num_tasks(self) -> int:
        return self.split.num_tasks

    def meta(self) -> Dict[str, Any]:
        return {"run_id": self.run_id, "seed": self.seed, "strategy": self.strategy,
                "beta": self.beta, "num_tasks": self.num_tasks}

    def to_dict(self) -> Dict[str, Any]:
        return to_jsonable({
            "record_version": RECORD_VERSION,
            "run_id": self.run_id,
            "seed": self.seed,
            "status": self.status,
            "error": self.error,
            "config": self.config,
            "accuracy_log": self.accuracy_log.to_dict(),
            "report": self.report.to_dict() if self.report is not None else None,
            "round_losses": self.round_losses,
            "round_curve": self.round_curve,
            "inversion_reports": [r.to_dict() for r in self.inversion_reports],
            "partition_stats": self.partition_stats,
            "timings": self.timings,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
        })

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "RunRecord":
        log = AccuracyLog.from_dict(d["accuracy_log"])
        rec = cls(
            run_id=str(d["run_id"]),
            seed=int(d["seed"]),
            config=dict(d.get("config", {})),
            split=log.split,
            accuracy_log=log,
            status=str(d.get("status", "incomplete")),
            error=d.get("error"),
            round_losses={int(k): [np.nan if v is None else v for v in vs]
                          for k, vs in d.get("round_losses", {}).items()},
            round_curve={int(k): [np.nan if v is None else v for v in vs]
                         for k, vs in d.get("round_curve", {}).items()},
            inversion_reports=[InversionReport.from_dict(r) for r in d.get("inversion_reports", [])],
            partition_stats=list(d.get("partition_stats", [])),
            timings=dict(d.get("timings", {})),
            started_at=str(d.get("started_at", "")),
            finished_at=str(d.get("finished_at", "")),
        )
        if len(log):
            rec.report = build_report(log, clamp=str(rec.config.get("metrics.clamp", "true")).lower() != "false")
        return rec


# ---------- building blocks ----------

def build_datasets(config: ExperimentConfig) -> Tuple[LabeledDataset, LabeledDataset]:
    seed = int(config["seed"])
    if config["dataset.kind"] == "idx":
        k = int(config["dataset.num_classes"])
        norm = bool(config["dataset.normalize"])
        train = load_idx(config["dataset.train_images"], config["dataset.train_labels"], num_classes=k, normalize=norm)
        test = load_idx(config["dataset.test_images"], config["dataset.test_labels"], num_classes=k, normalize=norm)
        return train, test
    full = generate_toy_dataset(
        config["dataset.num_classes"], config["dataset.per_class"], config.input_shape(), seed,
        noise=config["dataset.noise"],
    )
    return holdout_split(full, config["dataset.test_fraction"], named_rng(seed, "holdout"))


def make_monitor(
    spec: ModelSpec, teacher_params: ParameterVector, test_set: LabeledDataset, classes
) -> Callable[[FrozenModel], Dict[str, float]]:
    """Held-out diagnostics for the throwaway student; the inversion itself never sees real data."""
    idx = test_set.indices_of(classes)
    x, y = test_set.inputs[idx], test_set.labels[idx]
    t_pred = predict(spec, teacher_params, x) if idx.size else np.zeros(0, dtype=np.int64)

    def monitor(student: FrozenModel) -> Dict[str, float]:
        if idx.size == 0:
            return {"agreement": float("nan"), "accuracy": float("nan")}
        s_pred = predict(student.spec, student.params, x)
        return {"agreement": float(np.mean(s_pred == t_pred)), "accuracy": float(np.mean(s_pred == y))}

    return monitor


def resolve_run_id(config: ExperimentConfig) -> str:
    rid = str(config["experiment.run_id"]).strip()
    if rid and rid.lower() != "auto":
        return rid
    return make_run_id(config.strategy, config["partition.beta"], config["split.num_tasks"], config["seed"],
                       config_digest(config))


def config_digest(config: ExperimentConfig) -> str:
    """First 8 hex digits of sha256 over every setting except seed and experiment.*."""
    text = "\n".join(f"{k}={format_value(v)}" for k, v in config.as_dict().items()
                     if k != "seed" and not k.startswith("experiment."))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:8]


def _partition_stats(train: LabeledDataset, shards, task: int, classes) -> Dict[str, Any]:
    cls = sorted(int(c) for c in classes)
    hist = label_histogram(train, shards, cls)
    return {
        "task": task,
        "classes": cls,
        "histogram": hist.tolist(),
        "shard_sizes": [int(s.size) for s in shards],
        "mean_entropy": mean_label_entropy(hist),
    }


# ---------- run ----------

def run(config: Union[ExperimentConfig, Dict[str, Any]], root: Optional[Union[str, Path]] = None) -> RunRecord:
    if not isinstance(config, ExperimentConfig):
        config, _ = normalize_config(config)
    run_id = resolve_run_id(config)
    out_root = output_root(str(root) if root is not None else config["experiment.output_dir"])
    seed = int(config["seed"])
    save = bool(config["experiment.save_artifacts"])
    previous_binding = (bound_run(), bound_root())
    bind_run(run_id, out_root)
    watch = Stopwatch()

    record: Optional[RunRecord] = None
    try:
        log_event(stage="experiment", event="run_start",
                  details={"strategy": config.strategy, "seed": seed, "root": str(out_root)})
        cfg_text = config.to_text()
        artifacts.write_config_text(cfg_text, run_id=run_id, root=out_root)

        train, test = build_datasets(config)
        split = split_tasks(train, config["split.num_tasks"], seed)
        record = RunRecord(run_id=run_id, seed=seed, config=parse_config_text(cfg_text), split=split,
                           accuracy_log=AccuracyLog(split), started_at=now_utc_iso())
        watch.lap("data")

        spec = build_classifier_spec(train.input_shape, train.num_classes, width=config["model.width"])
        log_event(stage="experiment", event="model_built",
                  details={"layers": layer_summary(spec), "train": len(train), "test": len(test)})
        state = new_federation_state(spec, init_params(spec, named_rng(seed, "init")), seed,
                                     config["partition.num_clients"])
        strategy = build_strategy(config.strategy, **config.strategy_options())
        fed = config.fed_config()

        for k in range(split.num_tasks):
            shards = dirichlet_partition(train, split.tasks[k], config["partition.num_clients"],
                                         config["partition.beta"], config.partition_seed, task_id=k)
            record.partition_stats.append(_partition_stats(train, shards, k, split.tasks[k]))

            outcome = run_task(state, k, strategy, train, shards, test, split, fed)
            record.accuracy_log.append(outcome.per_class)
            record.round_losses[k] = outcome.round_losses
            if outcome.round_curve:
                record.round_curve[k] = outcome.round_curve
            watch.lap(f"task{k}")
            if save:
                artifacts.write_params_bin(state.global_params, k, run_id=run_id, root=out_root)

            is_last = k == split.num_tasks - 1
            monitor = None
            if isinstance(strategy, Target) and not is_last:
                monitor = make_monitor(spec, state.global_params, test, split.seen_classes(k))
            try:
                strategy.end_of_task(TaskEndContext(
                    task=k, spec=spec, global_params=state.global_params, dataset=train, shards=shards,
                    split=split, seed=seed, batch_size=fed.batch_size, is_last=is_last, monitor=monitor,
                ))
            except InversionAborted as e:
                if e.report is not None:
                    record.inversion_reports.append(e.report)
                raise
            if isinstance(strategy, Target) and not is_last:
                record.inversion_reports.append(strategy.reports[-1])
                if save:
                    artifacts.write_synthetic_bin(strategy.memory, k, run_id=run_id, root=out_root)
                watch.lap(f"generation{k}")

            log_event(stage="experiment", event="task_end",
                      details={"task": k, "seen_classes": len(split.seen_classes(k)),
                               "avg_acc": float(np.nanmean(list(outcome.per_class.values())))})
            record.timings = dict(watch.laps)
            artifacts.write_run_record(record.to_dict(), run_id=run_id, root=out_root)

        record.report = build_report(record.accuracy_log, clamp=config["metrics.clamp"])
        artifacts.write_metrics_csv(report_rows(record.report, record.meta()), run_id=run_id, root=out_root)
        record.status = "complete"
        record.finished_at = now_utc_iso()
        record.timings = {**watch.laps, "total": watch.total()}
        artifacts.write_run_record(record.to_dict(), run_id=run_id, root=out_root)
        log_event(stage="experiment", event="run_end",
                  details={"status": record.status, "final_avg_acc": record.report.average_accuracy[-1]})
        return record
    except Exception as e:
        log_event(stage="experiment", event="run_failed", level="ERROR",
                  details={"error": f"{type(e).__name__}: {e}"})
        if record is not None:
            record.status = "incomplete"
            record.error = f"{type(e).__name__}: {e}"
            record.finished_at = now_utc_iso()
            record.timings = {**watch.laps, "total": watch.total()}
            try:
                artifacts.write_run_record(record.to_dict(), run_id=run_id, root=out_root)
            except Exception:
                pass
        raise
    finally:
        bind_run(*previous_binding)
