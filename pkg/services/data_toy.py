"""
services/data_toy.py
--------------------------------
Procedural image classes for desk-scale runs.

Class c of K (pixel coordinates u, v in [0, 1)):
    theta_c = pi * c / K
    freq_c  = 2 + (c mod 3)
    wave    = 0.5 + 0.5 * sin(2 pi freq_c (u cos theta_c + v sin theta_c) + phase)
    center  = (0.5 + 0.3 cos(2 pi c / K), 0.5 + 0.3 sin(2 pi c / K)) + jitter
    blob    = exp(-|(u, v) - center|^2 / (2 * 0.12^2))
    image   = clip(0.5 * wave + 0.5 * blob + noise * N(0, 1), 0, 1), quantized to k/255

phase ~ U(0, 2 pi) and jitter ~ U(-0.05, 0.05)^2 per sample. All draws come
from the `data` stream, class by class. Quantization keeps an IDX round trip exact.
"""

from __future__ import annotations
from typing import Tuple

import numpy as np

from services.data_core import LabeledDataset
from utils.exceptions import DataError
from utils.logging import log_event
from utils.rng import named_rng


def generate_toy_dataset(
    num_classes: int,
    per_class: int,
    input_shape: Tuple[int, int, int] = (1, 16, 16),
    seed: int = 2021,
    *,
    noise: float = 0.15,
) -> LabeledDataset:
    if num_classes < 1 or per_class < 1:
        raise DataError(f"[data_toy] need num_classes >= 1 and per_class >= 1, got {num_classes}, {per_class}")
    if len(input_shape) != 3 or min(input_shape) < 1:
        raise DataError(f"[data_toy] input_shape must be C x H x W, got {input_shape}")
    if noise < 0:
        raise DataError(f"[data_toy] noise must be >= 0, got {noise}")

    rng = named_rng(seed, "data")
    c_dim, h, w = (int(s) for s in input_shape)
    v, u = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")

    images = np.empty((num_classes * per_class, c_dim, h, w))
    labels = np.repeat(np.arange(num_classes), per_class)
    for c in range(num_classes):
        theta = np.pi * c / num_classes
        freq = 2 + (c % 3)
        ring = 2 * np.pi * c / num_classes
        phase = rng.uniform(0.0, 2 * np.pi, size=per_class)
        jitter = rng.uniform(-0.05, 0.05, size=(per_class, 2))
        eps = rng.normal(size=(per_class, c_dim, h, w))

        proj = u * np.cos(theta) + v * np.sin(theta)
        wave = 0.5 + 0.5 * np.sin(2 * np.pi * freq * proj[None] + phase[:, None, None])
        cu = 0.5 + 0.3 * np.cos(ring) + jitter[:, 0]
        cv = 0.5 + 0.3 * np.sin(ring) + jitter[:, 1]
        d2 = (u[None] - cu[:, None, None]) ** 2 + (v[None] - cv[:, None, None]) ** 2
        blob = np.exp(-d2 / (2 * 0.12 ** 2))
        base = 0.5 * wave + 0.5 * blob
        img = np.clip(base[:, None] + noise * eps, 0.0, 1.0)
        images[c * per_class:(c + 1) * per_class] = np.round(img * 255.0) / 255.0

    log_event(
        stage="data",
        event="toy_dataset",
        details={"num_classes": num_classes, "per_class": per_class, "shape": list(input_shape), "seed": seed},
    )
    return LabeledDataset(images, labels, num_classes, (0.0, 1.0))
