"""
utils/logging.py
Purpose: Append-only JSONL event logger for simulator stages
(data, federation, inversion, strategies, metrics, experiment).
Scope: Called by every service module; the experiment runner binds the run folder.

Acceptance:
- Writes line-delimited JSON (.jsonl) under <root>/<run_id>/<run_id>_<stage>_log.jsonl
- Adds both UTC and local timestamps, schema_version, run_id, stage, level.
- With no bound run, events go to a bounded in-memory buffer (recent_events()).
- Never raises into the caller.
"""

from __future__ import annotations
import collections
import datetime
import json
import threading
from pathlib import Path
from typing import Any, Deque, Dict, List, Optional, Union

from constants import SCHEMA_VERSION
from utils.constants import MEMORY_LOG_CAP

LOCAL_TZ = datetime.datetime.now().astimezone().tzinfo
DEFAULT_LEVEL = "INFO"
STAGES = ("data", "federation", "inversion", "strategies", "metrics", "experiment")

_lock = threading.Lock()
_binding: Dict[str, Any] = {"run_id": None, "root": None}
_memory: Deque[Dict[str, Any]] = collections.deque(maxlen=MEMORY_LOG_CAP)


def _now_ts() -> tuple[str, str]:
    now_utc = datetime.datetime.now(datetime.timezone.utc)
    now_local = now_utc.astimezone(LOCAL_TZ)
    return now_utc.isoformat().replace("+00:00", "Z"), now_local.isoformat()


def _json_default(obj: Any) -> Any:
    # numpy scalars / arrays without importing numpy here
    if hasattr(obj, "tolist"):
        return obj.tolist()
    return str(obj)


def _stage_log_path(run_id: str, root: Path, stage: str) -> Path:
    return root / run_id / f"{run_id}_{stage}_log.jsonl"


def bind_run(run_id: Optional[str], root: Union[str, Path, None] = None) -> None:
    """Route subsequent events to `<root>/<run_id>/`; `bind_run(None)` unbinds."""
    with _lock:
        _binding["run_id"] = run_id
        _binding["root"] = Path(root) if (run_id and root is not None) else None


def bound_run() -> Optional[str]:
    return _binding["run_id"]


def bound_root() -> Optional[Path]:
    return _binding["root"]


def recent_events(stage: Optional[str] = None, event: Optional[str] = None) -> List[Dict[str, Any]]:
    """Snapshot of the in-memory buffer, optionally filtered."""
    with _lock:
        items = list(_memory)
    return [
        r for r in items
        if (stage is None or r.get("stage") == stage) and (event is None or r.get("event") == event)
    ]


def clear_events() -> None:
    with _lock:
        _memory.clear()


def log_event(
    *,
    stage: str,
    event: str,                 # e.g., "round_completed", "write_artifact"
    level: str = DEFAULT_LEVEL,
    artifact: Optional[str] = None,
    details: Optional[Dict[str, Any]] = None,
    schema_version: str = SCHEMA_VERSION,
) -> None:
    try:
        ts_utc, ts_local = _now_ts()
        run_id = _binding["run_id"]
        record: Dict[str, Any] = {
            "ts_utc": ts_utc,
            "ts_local": ts_local,
            "run_id": run_id,
            "stage": stage,
            "event": event,
            "level": level,
            "schema_version": schema_version,
        }
        if artifact:
            record["artifact"] = artifact
        if details:
            record["details"] = details
        with _lock:
            # the buffer always sees the event; the file only when a run is bound
            _memory.append(record)
            root = _binding["root"]
            if run_id and root is not None:
                path = _stage_log_path(run_id, root, stage)
                path.parent.mkdir(parents=True, exist_ok=True)
                line = json.dumps(record, separators=(",", ":"), default=_json_default)
                with path.open("a", encoding="utf-8") as f:
                    f.write(line + "\n")
    except Exception:
        pass
