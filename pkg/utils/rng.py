"""
UTILS :: rng.py

Purpose
-------
Named, independent random streams derived from one master seed, so adding or
consuming one stream never perturbs another.

Derivation
----------
    seed64 = int.from_bytes(sha256(f"{master}:{name}").digest()[:8], "big")
    rng    = numpy.random.default_rng(seed64)

Stream names in use: data, split, partition, init, client.<id>, generator,
sampling, exemplar.
"""

from __future__ import annotations
import hashlib

import numpy as np


def stream_seed(master_seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(master_seed)}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def named_rng(master_seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(master_seed, name))


def client_rng(master_seed: int, client_id: int) -> np.random.Generator:
    return named_rng(master_seed, f"client.{int(client_id)}")
