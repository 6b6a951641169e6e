"""
services/data_idx.py
--------------------------------
IDX reader/writer (the MNIST container format).

Layout: two zero bytes, a dtype byte (0x08 = unsigned byte), a dimension
count byte, one big-endian u32 per dimension, then raw row-major bytes.
Images are N x H x W (single channel) or N x H x W x C; labels are N.
Files ending in .gz are read/written through gzip.

Errors: IdxMagicError (header), IdxTruncatedError (short payload),
IdxCountMismatchError (image/label counts differ).
"""

from __future__ import annotations
import gzip
import struct
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from services.data_core import LabeledDataset
from utils.exceptions import IdxCountMismatchError, IdxMagicError, IdxTruncatedError
from utils.logging import log_event

PathLike = Union[str, Path]
_UBYTE = 0x08


def _read_bytes(path: PathLike) -> bytes:
    p = Path(path)
    opener = gzip.open if p.suffix == ".gz" else open
    with opener(p, "rb") as f:
        return f.read()


def _write_bytes(path: PathLike, data: bytes) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    opener = gzip.open if p.suffix == ".gz" else open
    with opener(p, "wb") as f:
        f.write(data)


def _parse(data: bytes, path: PathLike, ndims: Tuple[int, ...]) -> np.ndarray:
    if len(data) < 4:
        raise IdxTruncatedError(f"[data_idx] {path}: shorter than the 4-byte magic")
    z0, z1, dtype, ndim = data[0], data[1], data[2], data[3]
    if z0 != 0 or z1 != 0 or dtype != _UBYTE or ndim not in ndims:
        raise IdxMagicError(
            f"[data_idx] {path}: magic {data[:4].hex()} is not an unsigned-byte IDX file with {ndims} dims"
        )
    head = 4 + 4 * ndim
    if len(data) < head:
        raise IdxTruncatedError(f"[data_idx] {path}: header declares {ndim} dims but file ends early")
    dims = struct.unpack(f">{ndim}I", data[4:head])
    need = int(np.prod(dims))
    if len(data) - head < need:
        raise IdxTruncatedError(f"[data_idx] {path}: payload has {len(data) - head} bytes, header declares {need}")
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=head).reshape(dims)


def load_idx(
    images_path: PathLike,
    labels_path: PathLike,
    *,
    num_classes: Optional[int] = None,
    normalize: bool = False,
) -> LabeledDataset:
    """Pixels scaled to [0, 1]; with normalize=True each channel is standardized over the dataset."""
    raw_x = _parse(_read_bytes(images_path), images_path, (3, 4))
    raw_y = _parse(_read_bytes(labels_path), labels_path, (1,))
    if raw_x.shape[0] != raw_y.shape[0]:
        raise IdxCountMismatchError(
            f"[data_idx] {raw_x.shape[0]} images in {images_path} vs {raw_y.shape[0]} labels in {labels_path}"
        )
    x = raw_x[:, None, :, :] if raw_x.ndim == 3 else raw_x.transpose(0, 3, 1, 2)
    x = x.astype(np.float64) / 255.0
    value_range = (0.0, 1.0)
    if normalize:
        mean = x.mean(axis=(0, 2, 3), keepdims=True)
        std = x.std(axis=(0, 2, 3), keepdims=True)
        x = (x - mean) / np.where(std > 0, std, 1.0)
        value_range = (float(x.min()), float(x.max()))
    y = raw_y.astype(np.int64)
    k = int(num_classes) if num_classes else int(y.max()) + 1 if y.size else 0
    log_event(stage="data", event="load_idx", details={"images": str(images_path), "count": int(y.size), "classes": k})
    return LabeledDataset(x, y, k, value_range)


def write_idx(dataset: LabeledDataset, images_path: PathLike, labels_path: PathLike) -> None:
    """Inputs must lie in [0, 1]; they are stored as round(x * 255)."""
    x = dataset.inputs
    if x.min(initial=0.0) < 0.0 or x.max(initial=0.0) > 1.0:
        raise ValueError("[data_idx] write_idx needs inputs in [0, 1]")
    pix = np.round(x * 255.0).astype(np.uint8)
    pix = pix[:, 0] if pix.shape[1] == 1 else pix.transpose(0, 2, 3, 1)
    head = bytes([0, 0, _UBYTE, pix.ndim]) + struct.pack(f">{pix.ndim}I", *pix.shape)
    _write_bytes(images_path, head + pix.tobytes())
    labels = dataset.labels.astype(np.uint8)
    _write_bytes(labels_path, bytes([0, 0, _UBYTE, 1]) + struct.pack(">I", labels.size) + labels.tobytes())
