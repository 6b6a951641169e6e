"""
services/artifacts_core.py
--------------------------------
Core helpers for artifact writers:
- Run folder resolution and path safety
- Atomic writes (text/bytes)
- SHA256 hashing
- Generic CSV/JSON/bytes writers that also append a `write_artifact` event

Used by services/artifacts.py to keep the public API small and readable.
"""

from __future__ import annotations
from pathlib import Path
from typing import Any, Dict, Union
import hashlib
import json
import os
import tempfile

import pandas as pd

from constants import SCHEMA_VERSION
from utils.logging import log_event
from utils.runtime import output_root

PathLike = Union[str, Path]


# ---------- paths & atomic ----------

def _ensure_dir(p: Path) -> None:
    p.parent.mkdir(parents=True, exist_ok=True)


def runs_root(root: PathLike = None) -> Path:
    return output_root(str(root) if root is not None else None).resolve()


def run_dir(run_id: str, root: PathLike = None) -> Path:
    d = (runs_root(root) / run_id).resolve()
    d.mkdir(parents=True, exist_ok=True)
    return d


def safe_path(run_id: str, artifact_name: str, root: PathLike = None) -> Path:
    """<root>/<run_id>/<artifact_name>; refuses names that escape the run folder."""
    base = run_dir(run_id, root)
    target = (base / artifact_name).resolve()
    if base not in target.parents:
        raise ValueError(f"[artifacts_core] unsafe artifact path outside {base}: {artifact_name}")
    _ensure_dir(target)
    return target


def atomic_write_text(path: Path, text: str) -> int:
    _ensure_dir(path)
    with tempfile.NamedTemporaryFile("w", dir=str(path.parent), delete=False, encoding="utf-8", newline="") as tmp:
        tmp.write(text)
        tmp_path = Path(tmp.name)
    os.replace(tmp_path, path)
    return path.stat().st_size


def atomic_write_bytes(path: Path, data: bytes) -> int:
    _ensure_dir(path)
    with tempfile.NamedTemporaryFile("wb", dir=str(path.parent), delete=False) as tmp:
        tmp.write(data)
        tmp_path = Path(tmp.name)
    os.replace(tmp_path, path)
    return path.stat().st_size


# ---------- hashing ----------

def sha256_file(p: Path) -> str:
    h = hashlib.sha256()
    with p.open("rb") as f:
        for chunk in iter(lambda: f.read(1024 * 1024), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ---------- generic writers with logging ----------

def write_csv_with_log(
    *,
    df: pd.DataFrame,
    run_id: str,
    artifact_name: str,
    root: PathLike = None,
    stage: str = "experiment",
) -> Dict[str, Any]:
    out = safe_path(run_id, artifact_name, root)
    text = df.to_csv(index=False, lineterminator="\n")
    size = atomic_write_text(out, text)
    digest = sha256_file(out)
    log_event(stage=stage, event="write_artifact", artifact=artifact_name,
              details={"rows": int(df.shape[0]), "bytes": size, "sha256": digest})
    return {"path": str(out), "rows": int(df.shape[0]), "bytes": size, "sha256": digest}


def write_json_with_log(
    *,
    payload: Dict[str, Any],
    run_id: str,
    artifact_name: str,
    root: PathLike = None,
    stage: str = "experiment",
    schema_version: str = SCHEMA_VERSION,
) -> str:
    out = safe_path(run_id, artifact_name, root)
    body = dict(payload)
    body.setdefault("schema_version", schema_version)
    size = atomic_write_text(out, json.dumps(body, indent=2, sort_keys=True, allow_nan=False))
    log_event(stage=stage, event="write_artifact", artifact=artifact_name, details={"bytes": size})
    return str(out)


def write_bytes_with_log(
    *,
    data: bytes,
    run_id: str,
    artifact_name: str,
    root: PathLike = None,
    stage: str = "experiment",
) -> Dict[str, Any]:
    out = safe_path(run_id, artifact_name, root)
    size = atomic_write_bytes(out, data)
    digest = sha256_bytes(data)
    log_event(stage=stage, event="write_artifact", artifact=artifact_name,
              details={"bytes": size, "sha256": digest})
    return {"path": str(out), "bytes": size, "sha256": digest}


def write_text_with_log(
    *,
    text: str,
    run_id: str,
    artifact_name: str,
    root: PathLike = None,
    stage: str = "experiment",
) -> str:
    out = safe_path(run_id, artifact_name, root)
    size = atomic_write_text(out, text)
    log_event(stage=stage, event="write_artifact", artifact=artifact_name, details={"bytes": size})
    return str(out)


def load_json(path: PathLike) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))
