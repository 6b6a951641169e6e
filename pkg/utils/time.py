"""utils.time

Pure time helpers. Side-effect free.
"""

from __future__ import annotations

import time
from datetime import datetime, timezone


def now_utc_iso() -> str:
    """UTC timestamp in ISO-8601 without microseconds, with 'Z' suffix."""
    return datetime.now(timezone.utc).replace(microsecond=0).isoformat().replace("+00:00", "Z")


class Stopwatch:
    """Wall-clock timer; `lap(name)` records seconds since the previous lap."""

    def __init__(self) -> None:
        self._t0 = time.perf_counter()
        self._last = self._t0
        self.laps: dict[str, float] = {}

    def lap(self, name: str) -> float:
        now = time.perf_counter()
        dt = now - self._last
        self._last = now
        self.laps[name] = self.laps.get(name, 0.0) + dt
        return dt

    def total(self) -> float:
        return time.perf_counter() - self._t0
