"""
utils/runtime.py
----------------
Project-agnostic runtime helpers used by the CLI and the experiment runner.
"""

from __future__ import annotations
import os
from pathlib import Path
from typing import Optional

from utils.constants import OUTPUT_DIR, OUTPUT_ROOT_ENV


def output_root(configured: Optional[str] = None) -> Path:
    """
    Resolve the run output root: explicit config value, else the
    FCCL_SIM_OUTPUT_ROOT env var, else ./runs.
    """
    if configured and str(configured).strip().lower() not in ("", "auto"):
        return Path(configured)
    env = os.environ.get(OUTPUT_ROOT_ENV, "").strip()
    return Path(env) if env else Path(OUTPUT_DIR)
