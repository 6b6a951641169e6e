"""
UTILS :: jsonsafe.py

Purpose
-------
Convert nested results into strict JSON: numpy scalars and arrays become
Python numbers and lists, NaN/inf become null, tuples become lists and dict
keys become strings. Side-effect free.
"""

from __future__ import annotations
import math
from typing import Any

import numpy as np


def to_jsonable(obj: Any) -> Any:
    if obj is None or isinstance(obj, (bool, str)):
        return obj
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, int):
        return obj
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if hasattr(obj, "to_dict"):
        return to_jsonable(obj.to_dict())
    return str(obj)


def nan_if_none(v: Any) -> float:
    """Inverse of the null mapping for numeric fields read back from JSON."""
    return float("nan") if v is None else float(v)
