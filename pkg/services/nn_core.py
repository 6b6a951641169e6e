"""
services/nn_core.py
--------------------------------
Purpose
-------
Minimal reverse-mode engine over ModelSpec/ParameterVector: forward passes in
train/eval mode, exact gradients w.r.t. parameters and inputs.

Public API
----------
- Batch(inputs, labels=None)
- forward(spec, params, batch, mode) -> outputs
- forward_with_tape(spec, params, x, mode) -> (outputs, Tape)
- backward(spec, params, tape, dout, bn_input_grads=None) -> (grad, dx)
- value_and_grad / grad
- apply_running_stats(params, tape) -> params with EMA-updated BN stats

Notes
-----
- (spec, params) are never mutated. Train-mode forwards compute the EMA update
  of BN running statistics into the tape; callers that own a model commit it
  with apply_running_stats.
- The tape always records each BN layer's batch mean/variance (biased) of its
  pre-normalization input, in both modes; the BN-statistics loss reads them.
- Convolution uses an im2col built on numpy sliding windows.
"""

from __future__ import annotations
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from services.nn_params import ParameterVector
from services.nn_spec import LayerSpec, ModelSpec
from utils.exceptions import NumericError, ShapeError

MODES = ("train", "eval")


@dataclass
class Batch:
    inputs: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim < 2 or self.inputs.shape[0] < 1:
            raise ShapeError(f"[nn_core] batch needs >= 1 sample, got inputs shape {self.inputs.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if self.labels.shape[0] != self.inputs.shape[0]:
                raise ShapeError(
                    f"[nn_core] {self.labels.shape[0]} labels for {self.inputs.shape[0]} inputs"
                )

    @property
    def size(self) -> int:
        return int(self.inputs.shape[0])


@dataclass
class Tape:
    mode: str
    caches: List[Dict[str, Any]] = field(default_factory=list)
    bn_batch: Dict[int, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    bn_inputs: Dict[int, np.ndarray] = field(default_factory=dict)
    running: Dict[int, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


@dataclass
class GradResult:
    loss: float
    grad: ParameterVector
    dx: np.ndarray
    outputs: np.ndarray
    tape: Tape


# ---------- per-layer kernels ----------

def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> Tuple[np.ndarray, int, int]:
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def _col2im(dcols: np.ndarray, x_shape: Tuple[int, ...], k: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = x_shape
    d = dcols.reshape(n, ho, wo, c, k, k)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def _bn_axes(x: np.ndarray) -> Tuple[int, ...]:
    return (0,) if x.ndim == 2 else (0, 2, 3)


def _bshape(x: np.ndarray, v: np.ndarray) -> np.ndarray:
    return v if x.ndim == 2 else v.reshape(1, -1, 1, 1)


def _layer_forward(
    i: int, layer: LayerSpec, params: ParameterVector, x: np.ndarray, mode: str, tape: Tape
) -> Tuple[np.ndarray, Dict[str, Any]]:
    kind = layer.kind
    if kind == "affine":
        W, b = params.view(i, "W"), params.view(i, "b")
        return x @ W.T + b, {"x": x}
    if kind == "conv":
        W, b = params.view(i, "W"), params.view(i, "b")
        cols, ho, wo = _im2col(x, layer.kernel, layer.stride, layer.padding)
        out = cols @ W.reshape(W.shape[0], -1).T + b
        out = out.reshape(x.shape[0], ho, wo, W.shape[0]).transpose(0, 3, 1, 2)
        return out, {"cols": cols, "x_shape": x.shape, "ho": ho, "wo": wo}
    if kind == "bn":
        gamma, beta = params.view(i, "gamma"), params.view(i, "beta")
        axes = _bn_axes(x)
        mu_b = x.mean(axis=axes)
        var_b = x.var(axis=axes)
        tape.bn_batch[i] = (mu_b, var_b)
        tape.bn_inputs[i] = x
        if mode == "train":
            mu, var = mu_b, var_b
            run_m, run_v = params.bn_stats[i]
            m = layer.momentum
            tape.running[i] = ((1 - m) * run_m + m * mu_b, (1 - m) * run_v + m * var_b)
        else:
            mu, var = params.bn_stats[i]
        std = np.sqrt(var + layer.eps)
        xhat = (x - _bshape(x, mu)) / _bshape(x, std)
        out = _bshape(x, gamma) * xhat + _bshape(x, beta)
        return out, {"xhat": xhat, "std": std, "axes": axes}
    if kind == "relu":
        return np.maximum(x, 0.0), {"mask": x > 0}
    if kind == "flatten":
        return x.reshape(x.shape[0], -1), {"x_shape": x.shape}
    if kind == "reshape":
        return x.reshape((x.shape[0],) + layer.shape), {"x_shape": x.shape}
    if kind == "upsample":
        s = layer.scale
        return x.repeat(s, axis=2).repeat(s, axis=3), {}
    if kind == "tanh":
        t = np.tanh(x)
        return layer.low + (layer.high - layer.low) * (t + 1.0) / 2.0, {"t": t}
    raise ShapeError(f"[nn_core] unknown layer kind '{kind}' at layer {i}")


def _layer_backward(
    i: int, layer: LayerSpec, params: ParameterVector, cache: Dict[str, Any], dout: np.ndarray,
    mode: str, gvals: Optional[np.ndarray],
) -> np.ndarray:
    kind = layer.kind

    def put(name: str, g: np.ndarray) -> None:
        if gvals is not None:
            s = params.layout.slot(i, name)
            gvals[s.offset:s.offset + s.size] += g.reshape(-1)

    if kind == "affine":
        W = params.view(i, "W")
        put("W", dout.T @ cache["x"])
        put("b", dout.sum(axis=0))
        return dout @ W
    if kind == "conv":
        W = params.view(i, "W")
        o = W.shape[0]
        dflat = dout.transpose(0, 2, 3, 1).reshape(-1, o)
        put("W", (dflat.T @ cache["cols"]).reshape(W.shape))
        put("b", dflat.sum(axis=0))
        dcols = dflat @ W.reshape(o, -1)
        return _col2im(dcols, cache["x_shape"], layer.kernel, layer.stride, layer.padding, cache["ho"], cache["wo"])
    if kind == "bn":
        gamma = params.view(i, "gamma")
        xhat, std, axes = cache["xhat"], cache["std"], cache["axes"]
        put("gamma", (dout * xhat).sum(axis=axes))
        put("beta", dout.sum(axis=axes))
        dxhat = dout * _bshape(dout, gamma)
        if mode == "eval":
            return dxhat / _bshape(dout, std)
        m = dout.size // gamma.size
        s1 = dxhat.sum(axis=axes)
        s2 = (dxhat * xhat).sum(axis=axes)
        return (m * dxhat - _bshape(dout, s1) - xhat * _bshape(dout, s2)) / (m * _bshape(dout, std))
    if kind == "relu":
        return dout * cache["mask"]
    if kind in ("flatten", "reshape"):
        return dout.reshape(cache["x_shape"])
    if kind == "upsample":
        s = layer.scale
        n, c, h, w = dout.shape
        return dout.reshape(n, c, h // s, s, w // s, s).sum(axis=(3, 5))
    if kind == "tanh":
        t = cache["t"]
        return dout * (layer.high - layer.low) / 2.0 * (1.0 - t * t)
    raise ShapeError(f"[nn_core] unknown layer kind '{kind}' at layer {i}")


# ---------- public API ----------

def _check_input(spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or tuple(x.shape[1:]) != tuple(spec.input_shape) or x.shape[0] < 1:
        raise ShapeError(f"[nn_core] input shape {x.shape} does not match (N>=1,) + {spec.input_shape}")
    return x


def forward_with_tape(
    spec: ModelSpec, params: ParameterVector, x: Union[np.ndarray, Batch], mode: str = "eval"
) -> Tuple[np.ndarray, Tape]:
    if mode not in MODES:
        raise ValueError(f"[nn_core] mode must be one of {MODES}, got '{mode}'")
    if isinstance(x, Batch):
        x = x.inputs
    h = _check_input(spec, x)
    tape = Tape(mode=mode)
    for i, layer in enumerate(spec.layers):
        h, cache = _layer_forward(i, layer, params, h, mode, tape)
        if not np.all(np.isfinite(h)):
            raise NumericError(f"[nn_core] non-finite activation at layer {i} ({layer.kind})", layer=i)
        tape.caches.append(cache)
    return h, tape


def forward(spec: ModelSpec, params: ParameterVector, batch: Union[np.ndarray, Batch], mode: str = "eval") -> np.ndarray:
    out, _ = forward_with_tape(spec, params, batch, mode)
    return out


def backward(
    spec: ModelSpec,
    params: ParameterVector,
    tape: Tape,
    dout: np.ndarray,
    bn_input_grads: Optional[Dict[int, np.ndarray]] = None,
    *,
    input_only: bool = False,
) -> Tuple[Optional[ParameterVector], np.ndarray]:
    """
    Reverse pass. `bn_input_grads[l]` is added to the gradient arriving at BN
    layer l's input (used by the BN-statistics loss). With input_only=True the
    parameter gradient is skipped and None is returned in its place.
    """
    gvals = None if input_only else np.zeros(params.layout.size)
    d = np.asarray(dout, dtype=np.float64)
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        d = _layer_backward(i, layer, params, tape.caches[i], d, tape.mode, gvals)
        if bn_input_grads and i in bn_input_grads:
            d = d + bn_input_grads[i]
        if not np.all(np.isfinite(d)):
            raise NumericError(f"[nn_core] non-finite gradient at layer {i} ({layer.kind})", layer=i)
    grad = None if gvals is None else ParameterVector(gvals, params.layout, {})
    return grad, d


LossFn = Callable[[np.ndarray, Batch], Tuple[float, np.ndarray]]


def value_and_grad(
    spec: ModelSpec, params: ParameterVector, loss_fn: LossFn, batch: Batch, mode: str = "train"
) -> GradResult:
    """loss_fn(outputs, batch) -> (scalar, d loss / d outputs)."""
    out, tape = forward_with_tape(spec, params, batch, mode)
    loss, dout = loss_fn(out, batch)
    if not np.isfinite(loss):
        raise NumericError("[nn_core] non-finite loss value", layer=len(spec.layers) - 1)
    g, dx = backward(spec, params, tape, dout)
    return GradResult(float(loss), g, dx, out, tape)


def grad(
    spec: ModelSpec, params: ParameterVector, loss_fn: LossFn, batch: Batch, mode: str = "train"
) -> Tuple[ParameterVector, np.ndarray]:
    res = value_and_grad(spec, params, loss_fn, batch, mode)
    return res.grad, res.dx


def apply_running_stats(params: ParameterVector, tape: Tape) -> ParameterVector:
    """Copy of params whose BN running stats take the EMA update recorded by a train-mode tape."""
    out = params.copy()
    for layer, (m, v) in tape.running.items():
        out.bn_stats[layer] = (m.copy(), v.copy())
    return out


def predict(spec: ModelSpec, params: ParameterVector, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode argmax over the full head, chunked."""
    x = _check_input(spec, inputs)
    preds = [
        forward(spec, params, x[i:i + batch_size], "eval").argmax(axis=1)
        for i in range(0, x.shape[0], batch_size)
    ]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


@dataclass(frozen=True)
class FrozenModel:
    """A (spec, params) pair that is only ever evaluated, never trained."""

    spec: ModelSpec
    params: ParameterVector

    def logits(self, x: Union[np.ndarray, Batch]) -> np.ndarray:
        return forward(self.spec, self.params, x, "eval")

    def with_tape(self, x: np.ndarray) -> Tuple[np.ndarray, Tape]:
        return forward_with_tape(self.spec, self.params, x, "eval")
