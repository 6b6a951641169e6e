"""
UTILS :: exceptions.py

Purpose
-------
One small hierarchy for every actionable failure in the simulator. Services raise
the narrowest type; the CLI maps `exit_code` to the process exit status.

Exit codes
----------
- 1 : unexpected failure (anything not listed below)
- 2 : configuration (ConfigError)
- 3 : data / shape / plot-data (DataError, ShapeError, PlotDataError)
- 4 : numeric (NumericError, AggregationError)
"""

from __future__ import annotations
from typing import Any, Optional


class SimulatorError(Exception):
    """Base class; `exit_code` is what the CLI returns."""

    exit_code = 1


class ConfigError(SimulatorError, ValueError):
    """Unknown key, bad value, or an invalid sweep axis."""

    exit_code = 2


class DataError(SimulatorError, ValueError):
    """Dataset construction, file parsing, or partitioning failures."""

    exit_code = 3


class IdxMagicError(DataError):
    """IDX header magic does not match the expected layout."""


class IdxTruncatedError(DataError):
    """IDX payload is shorter than its header declares."""


class IdxCountMismatchError(DataError):
    """Image and label files disagree on the record count."""


class PartitionError(DataError):
    """Task split / client partition preconditions were violated."""


class ShapeError(SimulatorError, ValueError):
    """Batch, layout, or layer composition does not type-check."""

    exit_code = 3


class NumericError(SimulatorError, ArithmeticError):
    """Non-finite intermediate values. `layer` is set when the source is known."""

    exit_code = 4

    def __init__(self, message: str, *, layer: Optional[int] = None) -> None:
        super().__init__(message)
        self.layer = layer


class InversionAborted(NumericError):
    """Generator training diverged; `report` holds the rounds completed so far."""

    def __init__(self, message: str, *, report: Any = None, layer: Optional[int] = None) -> None:
        super().__init__(message, layer=layer)
        self.report = report


class AggregationError(SimulatorError, ValueError):
    """FedAvg received nothing to average or mismatched layouts."""

    exit_code = 4


class PlotDataError(SimulatorError, KeyError):
    """A record lacks the trace a figure needs."""

    exit_code = 3

    def __init__(self, field: str, run_id: str = "") -> None:
        where = f" (run '{run_id}')" if run_id else ""
        super().__init__(f"missing field '{field}'{where}")
        self.field = field
        self.run_id = run_id

    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return str(self.args[0])
