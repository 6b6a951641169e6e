"""
services/inv_core.py
--------------------------------
Purpose
-------
Server-side data generation: train a generator against a frozen teacher,
co-train a throwaway student by KL distillation on the accumulated samples,
and return only the synthetic memory.

Public API
----------
- InversionConfig, GeneratorSpec, SyntheticMemory, InversionReport
- distill_student_step(teacher, student_spec, student_params, x_hat, lr, ...) -> (params, state, loss)
- data_generation(teacher, trained_classes, config, rng, monitor=None) -> (SyntheticMemory, InversionReport)
- memory_to_bytes / memory_from_bytes

Notes
-----
- data_generation only ever sees teacher parameters. Diagnostics on real data
  go through the optional `monitor(student) -> {"agreement", "accuracy"}`
  callback owned by the caller.
- The generator is label-conditioned (it reads [z, one_hot(y)]) and trained
  with Adam by default (`gen_optimizer = "sgd"` gives momentum SGD).
- Per round: T_G generator steps on fresh (z, y), one regenerated batch is
  added to the memory, then `student_steps` distillation steps on draws from
  it. Rounds continue after the memory is full; new batches then overwrite
  the oldest entries, so the size never exceeds capacity.
"""

from __future__ import annotations
import struct
from dataclasses import dataclass, field
from math import ceil
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from constants import SYNTH_MAGIC, SYNTH_VERSION
from services.inv_losses import gen_losses_and_input_grad
from services.nn_core import FrozenModel, apply_running_stats, backward, forward, forward_with_tape
from services.nn_losses import loss_kl_and_grad
from services.nn_optim import SGDState, adam_step, sgd_step
from services.nn_params import ParameterVector, init_params
from services.nn_spec import ModelSpec, build_generator_spec, require_bn
from utils.exceptions import ConfigError, DataError, InversionAborted, NumericError
from utils.logging import log_event

Monitor = Callable[[FrozenModel], Dict[str, float]]
GEN_OPTIMIZERS = ("adam", "sgd")


@dataclass(frozen=True)
class InversionConfig:
    noise_dim: int = 64
    batch_size: int = 64
    gen_steps: int = 5
    gen_optimizer: str = "adam"
    lr_g: float = 5e-3
    gen_betas: Tuple[float, float] = (0.5, 0.999)
    gen_momentum: float = 0.9          # sgd only
    lr_s: float = 0.01
    student_momentum: float = 0.9
    lambda_div: float = 1.0
    lambda_bn: float = 1.0
    capacity: int = 320
    rounds: Optional[int] = None       # None -> max(ceil(capacity / batch_size), min_rounds)
    min_rounds: int = 30
    student_steps: int = 10
    provenance: int = 0

    def resolved_rounds(self) -> int:
        if self.rounds is not None:
            return int(self.rounds)
        return max(ceil(self.capacity / self.batch_size), int(self.min_rounds))


@dataclass(frozen=True)
class GeneratorSpec:
    """Label-conditioned generator: the body reads [z, one_hot(y)]."""

    noise_dim: int
    num_classes: int
    body: ModelSpec
    low: float
    high: float

    def inputs(self, z: np.ndarray, y: np.ndarray) -> np.ndarray:
        return np.concatenate([z, np.eye(self.num_classes)[y]], axis=1)


def build_generator(
    noise_dim: int, num_classes: int, image_shape: Tuple[int, int, int], low: float, high: float
) -> GeneratorSpec:
    body = build_generator_spec(int(noise_dim) + int(num_classes), image_shape, low=low, high=high)
    return GeneratorSpec(int(noise_dim), int(num_classes), body, float(low), float(high))


@dataclass(frozen=True)
class SyntheticMemory:
    samples: np.ndarray                 # N x C x H x W, no labels
    capacity: int
    provenance: int
    low: float = 0.0
    high: float = 1.0

    @property
    def size(self) -> int:
        return int(self.samples.shape[0])

    def draw(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform draw; with replacement only when memory is smaller than the batch."""
        pick = rng.choice(self.size, size=batch_size, replace=self.size < batch_size)
        return self.samples[pick]


@dataclass
class InversionReport:
    ce: List[float] = field(default_factory=list)
    div: List[float] = field(default_factory=list)
    bn: List[float] = field(default_factory=list)
    total: List[float] = field(default_factory=list)
    synthetic_agreement: List[float] = field(default_factory=list)
    class_coverage: List[int] = field(default_factory=list)
    monitor_agreement: List[float] = field(default_factory=list)
    monitor_accuracy: List[float] = field(default_factory=list)
    memory_size: List[int] = field(default_factory=list)
    provenance: int = 0
    aborted: bool = False

    @property
    def rounds_completed(self) -> int:
        return len(self.total)

    @property
    def student_accuracy(self) -> Optional[float]:
        return self.monitor_accuracy[-1] if self.monitor_accuracy else None

    def to_dict(self) -> Dict[str, object]:
        return {
            "provenance": self.provenance,
            "aborted": self.aborted,
            "rounds_completed": self.rounds_completed,
            "ce": self.ce, "div": self.div, "bn": self.bn, "total": self.total,
            "synthetic_agreement": self.synthetic_agreement,
            "class_coverage": self.class_coverage,
            "monitor_agreement": self.monitor_agreement,
            "monitor_accuracy": self.monitor_accuracy,
            "memory_size": self.memory_size,
        }

    @classmethod
    def from_dict(cls, d: Dict[str, object]) -> "InversionReport":
        keys = ("ce", "div", "bn", "total", "synthetic_agreement", "class_coverage",
                "monitor_agreement", "monitor_accuracy", "memory_size")
        return cls(**{k: list(d.get(k, [])) for k in keys}, provenance=int(d.get("provenance", 0)),
                   aborted=bool(d.get("aborted", False)))


def distill_student_step(
    teacher: FrozenModel,
    student_spec: ModelSpec,
    student_params: ParameterVector,
    x_hat: np.ndarray,
    lr: float,
    state: Optional[SGDState] = None,
    momentum: float = 0.0,
) -> Tuple[ParameterVector, SGDState, float]:
    """One SGD step on KL(teacher(x) || student(x)); the student runs in train mode."""
    out, tape = forward_with_tape(student_spec, student_params, x_hat, "train")
    loss, d_s, _ = loss_kl_and_grad(teacher.logits(x_hat), out)
    g, _ = backward(student_spec, student_params, tape, d_s)
    params = apply_running_stats(student_params, tape)
    params, state = sgd_step(params, g, lr, momentum, 0.0, state)
    return params, state, loss


def _agreement(teacher: FrozenModel, student: FrozenModel, x: np.ndarray) -> float:
    return float(np.mean(teacher.logits(x).argmax(axis=1) == student.logits(x).argmax(axis=1)))


class _GeneratorOptimizer:
    def __init__(self, config: InversionConfig) -> None:
        if config.gen_optimizer not in GEN_OPTIMIZERS:
            raise ConfigError(
                f"[inv_core] unknown generator optimizer '{config.gen_optimizer}'. Allowed: {list(GEN_OPTIMIZERS)}"
            )
        self.config = config
        self.state: Optional[object] = None

    def step(self, params: ParameterVector, grad: ParameterVector) -> ParameterVector:
        c = self.config
        if c.gen_optimizer == "adam":
            params, self.state = adam_step(params, grad, c.lr_g, c.gen_betas, state=self.state)
        else:
            params, self.state = sgd_step(params, grad, c.lr_g, c.gen_momentum, 0.0, self.state)
        return params


class _Memory:
    """Fixed-capacity sample buffer; once full, new batches overwrite the oldest entries."""

    def __init__(self, capacity: int, shape: Tuple[int, ...]) -> None:
        self.buf = np.zeros((int(capacity),) + tuple(shape))
        self.size = 0
        self.cursor = 0

    @property
    def full(self) -> bool:
        return self.size == self.buf.shape[0]

    def add(self, x: np.ndarray) -> None:
        cap = self.buf.shape[0]
        if not self.full:
            take = min(x.shape[0], cap - self.size)
            self.buf[self.size:self.size + take] = x[:take]
            self.size += take
            return
        k = min(x.shape[0], cap)
        self.buf[(self.cursor + np.arange(k)) % cap] = x[:k]
        self.cursor = (self.cursor + k) % cap

    def samples(self) -> np.ndarray:
        return self.buf[:self.size].copy()


def data_generation(
    teacher: FrozenModel,
    trained_classes: Sequence[int],
    config: InversionConfig,
    rng: np.random.Generator,
    monitor: Optional[Monitor] = None,
    *,
    value_range: Tuple[float, float] = (0.0, 1.0),
) -> Tuple[SyntheticMemory, InversionReport]:
    require_bn(teacher.spec)
    b = int(config.batch_size)
    if config.capacity < b:
        raise ConfigError(f"[inv_core] capacity {config.capacity} is smaller than the generator batch {b}")
    classes = np.array(sorted(int(c) for c in trained_classes), dtype=np.int64)
    if classes.size == 0:
        raise ConfigError("[inv_core] data generation needs at least one trained class")

    low, high = value_range
    shape = tuple(teacher.spec.input_shape)
    report = InversionReport(provenance=config.provenance)
    rounds = config.resolved_rounds()
    if rounds <= 0:
        return SyntheticMemory(np.zeros((0,) + shape), config.capacity, config.provenance, low, high), report

    gen = build_generator(config.noise_dim, teacher.spec.num_outputs, shape, low, high)
    optimizer = _GeneratorOptimizer(config)
    g_params = init_params(gen.body, rng)
    s_params = init_params(teacher.spec, rng)
    s_state = SGDState()
    memory = _Memory(config.capacity, shape)

    try:
        for r in range(rounds):
            z = rng.standard_normal((b, config.noise_dim))
            y_hat = rng.choice(classes, size=b)
            g_in = gen.inputs(z, y_hat)
            student = FrozenModel(teacher.spec, s_params)
            comps: Dict[str, float] = {}
            for _ in range(int(config.gen_steps)):
                x_hat, g_tape = forward_with_tape(gen.body, g_params, g_in, "train")
                comps, dx = gen_losses_and_input_grad(
                    teacher, student, x_hat, y_hat, config.lambda_div, config.lambda_bn, classes
                )
                if not np.isfinite(comps["total"]):
                    raise NumericError("[inv_core] non-finite generator loss")
                gg, _ = backward(gen.body, g_params, g_tape, dx)
                g_params = apply_running_stats(g_params, g_tape)
                g_params = optimizer.step(g_params, gg)

            x_new = forward(gen.body, g_params, g_in, "train")
            memory.add(x_new)

            pool = memory.samples()
            for _ in range(int(config.student_steps)):
                pick = rng.choice(memory.size, size=b, replace=memory.size < b)
                s_params, s_state, _ = distill_student_step(
                    teacher, teacher.spec, s_params, pool[pick], config.lr_s, s_state, config.student_momentum
                )

            student = FrozenModel(teacher.spec, s_params)
            report.ce.append(float(comps.get("ce", np.nan)))
            report.div.append(float(comps.get("div", np.nan)))
            report.bn.append(float(comps.get("bn", np.nan)))
            report.total.append(float(comps.get("total", np.nan)))
            report.synthetic_agreement.append(_agreement(teacher, student, x_new))
            report.class_coverage.append(int(np.unique(teacher.logits(x_new).argmax(axis=1)).size))
            report.memory_size.append(memory.size)
            if monitor is not None:
                diag = monitor(student)
                report.monitor_agreement.append(float(diag.get("agreement", np.nan)))
                report.monitor_accuracy.append(float(diag.get("accuracy", np.nan)))
            log_event(stage="inversion", event="generation_round",
                      details={"round": r, "memory": memory.size, "coverage": report.class_coverage[-1],
                               **{k: round(v, 6) for k, v in comps.items()}})
    except NumericError as e:
        report.aborted = True
        log_event(stage="inversion", event="generation_aborted", level="ERROR",
                  details={"rounds_completed": report.rounds_completed, "error": str(e)})
        raise InversionAborted(f"[inv_core] generator training diverged: {e}", report=report, layer=e.layer) from e

    return SyntheticMemory(memory.samples(), config.capacity, config.provenance, low, high), report


# ---------- serialization ----------

def memory_to_bytes(memory: SyntheticMemory) -> bytes:
    shape = memory.samples.shape[1:]
    head = SYNTH_MAGIC + struct.pack("<HI", SYNTH_VERSION, memory.size)
    head += struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)
    head += struct.pack("<iIff", memory.provenance, memory.capacity, memory.low, memory.high)
    return head + np.asarray(memory.samples, dtype="<f4").tobytes()


def memory_from_bytes(data: bytes) -> SyntheticMemory:
    if data[:4] != SYNTH_MAGIC:
        raise DataError("[inv_core] bad magic; not a synthetic memory blob")
    try:
        version, count = struct.unpack_from("<HI", data, 4)
        (ndim,) = struct.unpack_from("<B", data, 10)
        shape = struct.unpack_from(f"<{ndim}I", data, 11)
        pos = 11 + 4 * ndim
        provenance, capacity, low, high = struct.unpack_from("<iIff", data, pos)
    except struct.error as e:
        raise DataError(f"[inv_core] truncated synthetic memory header: {e}") from e
    if version != SYNTH_VERSION:
        raise DataError(f"[inv_core] unsupported synthetic memory version {version}")
    pos += struct.calcsize("<iIff")
    need = count * int(np.prod(shape)) * 4
    if len(data) - pos < need:
        raise DataError("[inv_core] truncated synthetic memory payload")
    samples = np.frombuffer(data, dtype="<f4", count=count * int(np.prod(shape)), offset=pos)
    return SyntheticMemory(samples.astype(np.float64).reshape((count,) + tuple(shape)), capacity, provenance, low, high)
