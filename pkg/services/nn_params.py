"""
services/nn_params.py
--------------------------------
ParameterVector: flat float64 values + layout + BN running statistics.

Public API
----------
- ParameterVector (view, copy, zeros_like, with_values, compatible)
- init_params(spec, rng)
- params_to_bytes / params_from_bytes

Binary format (little-endian)
-----------------------------
  magic b"FCPV" | u16 version | u32 slot count
  per slot : u32 layer | u8 name length | name | u8 ndim | u32 dims...
  f32 values (layout order)
  u32 bn count; per BN layer: u32 layer | u32 features | f32 mean[f] | f32 var[f]
"""

from __future__ import annotations
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from constants import PARAMS_MAGIC, PARAMS_VERSION
from services.nn_spec import ModelSpec, ParamLayout, ParamSlot, param_layout
from utils.exceptions import DataError, ShapeError

BNStats = Dict[int, Tuple[np.ndarray, np.ndarray]]


@dataclass
class ParameterVector:
    values: np.ndarray
    layout: ParamLayout
    bn_stats: BNStats = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.size != self.layout.size:
            raise ShapeError(f"[nn_params] {self.values.size} values for a layout of size {self.layout.size}")

    def view(self, layer: int, name: str) -> np.ndarray:
        s = self.layout.slot(layer, name)
        return self.values[s.offset:s.offset + s.size].reshape(s.shape)

    def copy(self) -> "ParameterVector":
        return ParameterVector(
            self.values.copy(),
            self.layout,
            {k: (m.copy(), v.copy()) for k, (m, v) in self.bn_stats.items()},
        )

    def with_values(self, values: np.ndarray) -> "ParameterVector":
        """Same layout and (copied) BN stats, new trainable values."""
        out = self.copy()
        out.values = np.asarray(values, dtype=np.float64).reshape(-1).copy()
        return out

    def zeros_like(self) -> "ParameterVector":
        """Gradient-shaped container: zero values and no BN stats."""
        return ParameterVector(np.zeros_like(self.values), self.layout, {})

    def compatible(self, other: "ParameterVector") -> bool:
        return self.layout.signature() == other.layout.signature()


def _fan_in(slot: ParamSlot) -> int:
    return int(np.prod(slot.shape[1:]))


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParameterVector:
    """Kaiming-uniform weights (bound sqrt(6/fan_in)), zero bias, BN gamma=1 beta=0, stats (0, 1)."""
    layout = param_layout(spec)
    values = np.zeros(layout.size, dtype=np.float64)
    for s in layout.slots:
        sl = slice(s.offset, s.offset + s.size)
        if s.name == "W":
            bound = np.sqrt(6.0 / max(_fan_in(s), 1))
            values[sl] = rng.uniform(-bound, bound, size=s.size)
        elif s.name == "gamma":
            values[sl] = 1.0
    stats = {layer: (np.zeros(f), np.ones(f)) for layer, f in layout.bn_sizes}
    return ParameterVector(values, layout, stats)


# ---------- serialization ----------

def params_to_bytes(params: ParameterVector) -> bytes:
    out = bytearray()
    out += PARAMS_MAGIC
    out += struct.pack("<HI", PARAMS_VERSION, len(params.layout.slots))
    for s in params.layout.slots:
        name = s.name.encode("ascii")
        out += struct.pack("<IB", s.layer, len(name)) + name
        out += struct.pack("<B", len(s.shape)) + struct.pack(f"<{len(s.shape)}I", *s.shape)
    out += params.values.astype("<f4").tobytes()
    out += struct.pack("<I", len(params.layout.bn_sizes))
    for layer, f in params.layout.bn_sizes:
        m, v = params.bn_stats[layer]
        out += struct.pack("<II", layer, f)
        out += np.asarray(m, dtype="<f4").tobytes() + np.asarray(v, dtype="<f4").tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataError(f"[nn_params] truncated parameter blob at byte {self.pos} (need {n} more)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def params_from_bytes(data: bytes) -> ParameterVector:
    r = _Reader(data)
    if r.take(4) != PARAMS_MAGIC:
        raise DataError("[nn_params] bad magic; not a parameter blob")
    version, n_slots = r.unpack("<HI")
    if version != PARAMS_VERSION:
        raise DataError(f"[nn_params] unsupported parameter blob version {version}")
    slots: List[ParamSlot] = []
    offset = 0
    for _ in range(n_slots):
        layer, name_len = r.unpack("<IB")
        name = r.take(name_len).decode("ascii")
        (ndim,) = r.unpack("<B")
        shape = tuple(r.unpack(f"<{ndim}I"))
        slots.append(ParamSlot(layer, name, offset, shape))
        offset += int(np.prod(shape))
    values = np.frombuffer(r.take(4 * offset), dtype="<f4").astype(np.float64)
    (n_bn,) = r.unpack("<I")
    stats: BNStats = {}
    bn_sizes: List[Tuple[int, int]] = []
    for _ in range(n_bn):
        layer, f = r.unpack("<II")
        m = np.frombuffer(r.take(4 * f), dtype="<f4").astype(np.float64)
        v = np.frombuffer(r.take(4 * f), dtype="<f4").astype(np.float64)
        stats[layer] = (m, v)
        bn_sizes.append((layer, f))
    layout = ParamLayout(tuple(slots), offset, tuple(bn_sizes))
    return ParameterVector(values, layout, stats)
