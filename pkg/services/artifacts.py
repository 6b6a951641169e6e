"""
services/artifacts.py
=====================
Thin facade over artifacts_core naming every file of a run folder:

    <root>/<run_id>/config.txt
    <root>/<run_id>/run_record.json
    <root>/<run_id>/metrics.csv
    <root>/<run_id>/params_task<k>.bin
    <root>/<run_id>/synthetic_task<k>.bin
    <root>/<sweep_id>/sweep_summary.csv

Plot data goes to an explicit output folder instead (see write_plot_csv).
"""

from __future__ import annotations
from pathlib import Path
from typing import Any, Dict, Union

import pandas as pd

from services.artifacts_core import (
    PathLike,
    atomic_write_text,
    load_json,
    run_dir,
    write_bytes_with_log,
    write_csv_with_log,
    write_json_with_log,
    write_text_with_log,
)
from services.inv_core import SyntheticMemory, memory_to_bytes
from services.nn_params import ParameterVector, params_to_bytes
from utils.logging import log_event

__all__ = [
    "CONFIG_NAME",
    "RECORD_NAME",
    "METRICS_NAME",
    "SUMMARY_NAME",
    "write_config_text",
    "write_run_record",
    "write_metrics_csv",
    "write_params_bin",
    "write_synthetic_bin",
    "write_sweep_summary",
    "write_plot_csv",
    "load_run_record",
    "run_dir",
]

CONFIG_NAME = "config.txt"
RECORD_NAME = "run_record.json"
METRICS_NAME = "metrics.csv"
SUMMARY_NAME = "sweep_summary.csv"


def write_config_text(text: str, *, run_id: str, root: PathLike = None) -> str:
    return write_text_with_log(text=text, run_id=run_id, artifact_name=CONFIG_NAME, root=root)


def write_run_record(record: Dict[str, Any], *, run_id: str, root: PathLike = None) -> str:
    return write_json_with_log(payload=record, run_id=run_id, artifact_name=RECORD_NAME, root=root)


def write_metrics_csv(df: pd.DataFrame, *, run_id: str, root: PathLike = None) -> Dict[str, Any]:
    return write_csv_with_log(df=df, run_id=run_id, artifact_name=METRICS_NAME, root=root, stage="metrics")


def write_params_bin(params: ParameterVector, task: int, *, run_id: str, root: PathLike = None) -> Dict[str, Any]:
    return write_bytes_with_log(data=params_to_bytes(params), run_id=run_id,
                                artifact_name=f"params_task{int(task)}.bin", root=root)


def write_synthetic_bin(memory: SyntheticMemory, task: int, *, run_id: str, root: PathLike = None) -> Dict[str, Any]:
    return write_bytes_with_log(data=memory_to_bytes(memory), run_id=run_id,
                                artifact_name=f"synthetic_task{int(task)}.bin", root=root, stage="inversion")


def write_sweep_summary(df: pd.DataFrame, *, sweep_id: str, root: PathLike = None) -> Dict[str, Any]:
    return write_csv_with_log(df=df, run_id=sweep_id, artifact_name=SUMMARY_NAME, root=root)


def write_plot_csv(df: pd.DataFrame, figure: str, out_dir: Union[str, Path]) -> Dict[str, Any]:
    """<out_dir>/<figure>.csv, written atomically."""
    out = Path(out_dir) / f"{figure}.csv"
    size = atomic_write_text(out, df.to_csv(index=False, lineterminator="\n"))
    log_event(stage="experiment", event="write_artifact", artifact=out.name,
              details={"rows": int(df.shape[0]), "bytes": size, "figure": figure})
    return {"path": str(out), "rows": int(df.shape[0]), "bytes": size}


def load_run_record(path: Union[str, Path]) -> Dict[str, Any]:
    """Accepts a run folder or the run_record.json path itself."""
    p = Path(path)
    return load_json(p / RECORD_NAME if p.is_dir() else p)
