"""
services/exp_sweep.py
--------------------------------
Purpose
-------
Cartesian sweeps over configuration keys, repeated for every seed, with a
summary CSV of means and standard deviations across seeds.

Public API
----------
- parse_axis(["key=v1,v2", ...]) -> {key: [raw values]}
- sweep_cells(axis) -> list of {key: raw value}
- sweep(config, axis, seeds=None, root=None, workers=None) -> list[RunRecord]
- summarize(records, axis_keys) -> DataFrame

Notes
-----
- Axis keys are validated against the registry (and every value parsed)
  before any run starts. `seed` and `seeds` cannot be swept; use `seeds`.
- With sweep.workers > 1, cells run in a process pool; records come back in
  cell order either way.
"""

from __future__ import annotations
import itertools
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from services import artifacts
from services.exp_config import REGISTRY, ExperimentConfig, normalize_config, parse_value
from services.exp_runner import RunRecord, resolve_run_id, run
from services.metrics_core import mean_over_defined
from utils.exceptions import ConfigError
from utils.logging import log_event
from utils.naming import sweep_cell_id
from utils.runtime import output_root

Axis = Mapping[str, Sequence[str]]
_RESERVED = ("seed", "seeds", "experiment.run_id", "experiment.output_dir")


def parse_axis(items: Iterable[str]) -> Dict[str, List[str]]:
    axis: Dict[str, List[str]] = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"[exp_sweep] axis must be key=v1,v2,..., got '{item}'")
        key, values = (p.strip() for p in item.split("=", 1))
        vals = [v.strip() for v in values.split(",") if v.strip()]
        if not vals:
            raise ConfigError(f"[exp_sweep] axis '{key}' has no values")
        axis[key] = vals
    return axis


def _validate_axis(axis: Axis) -> None:
    for key, values in axis.items():
        if key not in REGISTRY:
            raise ConfigError(f"[exp_sweep] unknown axis key '{key}'")
        if key in _RESERVED:
            raise ConfigError(f"[exp_sweep] '{key}' cannot be swept; set `seeds` instead")
        for v in values:
            parse_value(REGISTRY[key], v)


def sweep_cells(axis: Axis) -> List[Dict[str, str]]:
    """Cartesian product in sorted-key order; an empty axis is one empty cell."""
    keys = sorted(axis)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(list(axis[k]) for k in keys))]


def _run_cell(values: Dict[str, Any], root: str) -> Dict[str, Any]:
    cfg, _ = normalize_config(values)
    return run(cfg, root=root).to_dict()


def sweep(
    config: ExperimentConfig,
    axis: Axis,
    seeds: Optional[Sequence[int]] = None,
    root: Optional[Union[str, Path]] = None,
    workers: Optional[int] = None,
) -> List[RunRecord]:
    _validate_axis(axis)
    seed_list = [int(s) for s in (seeds if seeds is not None else config["seeds"])]
    if not seed_list:
        raise ConfigError("[exp_sweep] at least one seed is required")
    out_root = output_root(str(root) if root is not None else config["experiment.output_dir"])
    sweep_id = resolve_run_id(config)

    jobs: List[Dict[str, Any]] = []
    for cell in sweep_cells(axis):
        for s in seed_list:
            values = {**config.values, **cell, "seed": s,
                      "experiment.run_id": sweep_cell_id(sweep_id, {**cell, "seed": s})}
            normalize_config(values)
            jobs.append(values)
    log_event(stage="experiment", event="sweep_start",
              details={"sweep_id": sweep_id, "cells": len(jobs), "axis": {k: list(v) for k, v in axis.items()}})

    n_workers = int(workers if workers is not None else config["sweep.workers"])
    if n_workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(n_workers, len(jobs))) as pool:
            dicts = list(pool.map(_run_cell, jobs, [str(out_root)] * len(jobs)))
    else:
        dicts = [_run_cell(v, str(out_root)) for v in jobs]
    records = [RunRecord.from_dict(d) for d in dicts]

    summary = summarize(records, sorted(axis))
    artifacts.write_sweep_summary(summary, sweep_id=sweep_id, root=out_root)
    log_event(stage="experiment", event="sweep_end", details={"sweep_id": sweep_id, "runs": len(records)})
    return records


def _final(record: RunRecord) -> Dict[str, float]:
    rep = record.report
    if rep is None or not rep.average_accuracy:
        return {"avg_acc": np.nan, "F": np.nan, "R": np.nan, "old": np.nan, "new": np.nan}
    k = len(rep.average_accuracy)
    r = rep.relative.get(k)
    old, new = rep.old_new[-1]
    return {"avg_acc": rep.average_accuracy[-1], "F": rep.forgetting.get(k, np.nan),
            "R": np.nan if r is None else r, "old": old, "new": new}


def summarize(records: Sequence[RunRecord], axis_keys: Sequence[str]) -> pd.DataFrame:
    """
    One row per cell: mean and sample std over seeds of the final-checkpoint
    metrics. Undefined R values are left out of R_mean/R_std and counted in
    R_undefined.
    """
    rows = []
    for rec in records:
        row = {k: rec.config.get(k, "") for k in axis_keys}
        row.update({"strategy": rec.strategy, "seed": rec.seed, **_final(rec)})
        rows.append(row)
    df = pd.DataFrame(rows)
    group = list(axis_keys) + ["strategy"]
    metrics = ["avg_acc", "F", "R", "old", "new"]
    if df.empty:
        return pd.DataFrame(columns=group + ["n_seeds"] + [f"{m}_{s}" for m in metrics for s in ("mean", "std")]
                            + ["R_undefined"])
    grouped = df.groupby(group, sort=False)
    agg = grouped[metrics].agg(["mean", "std"])
    agg.columns = [f"{m}_{s}" for m, s in agg.columns]
    r_defined = [mean_over_defined(values) for values in grouped["R"].apply(list)]
    agg["R_mean"] = [m for m, _ in r_defined]
    agg["R_undefined"] = [n for _, n in r_defined]
    agg.insert(0, "n_seeds", grouped["seed"].count())
    return agg.reset_index().round(6)
