"""
services/exp_config.py
--------------------------------
Purpose
-------
Declarative registry of every experiment setting, the flat `key = value`
file format, CLI overrides, and normalization into an ExperimentConfig.

Public API
----------
- REGISTRY (dotted key -> Setting), STRATEGY_NAMES
- parse_config_text(text) / load_config_file(path) -> {key: raw string}
- parse_overrides(["key=value", ...]) -> {key: raw string}
- normalize_config(raw) -> (ExperimentConfig, warnings)
- resolve_config(path=None, overrides=()) -> (ExperimentConfig, warnings)
- ExperimentConfig.to_text() -> same text format, sorted keys

Notes
-----
- Unknown keys and out-of-domain values raise ConfigError before any work.
- `auto` is accepted by auto-int/auto-float keys and resolves at run time:
  fed.alpha (10 for <= 2 tasks, else 100), target.capacity (per-class
  capacity times trained classes), target.rounds (enough to fill capacity,
  at least target.min_rounds),
  partition.seed (the master seed), replay.global_budget (clients x budget),
  experiment.run_id (derived name), experiment.output_dir (env, else ./runs).
- Warnings are non-fatal notices: keys set for a strategy that ignores them.
"""

from __future__ import annotations
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

from services.fed_core import TEACHER_MODES, FedConfig
from services.inv_core import GEN_OPTIMIZERS, InversionConfig
from utils.constants import DEFAULT_SEEDS
from utils.exceptions import ConfigError

STRATEGY_NAMES = ("finetune", "fedlwf", "fedewc", "replay_local", "replay_global", "target")
KINDS = ("int", "float", "bool", "str", "choice", "int_list", "beta", "auto_int", "auto_float")
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass(frozen=True)
class Setting:
    key: str
    kind: str
    default: Any
    minimum: Optional[float] = None
    maximum: Optional[float] = None
    exclusive_min: bool = False
    choices: Tuple[str, ...] = ()
    help: str = ""


def _s(key: str, kind: str, default: Any, **kw: Any) -> Tuple[str, Setting]:
    return key, Setting(key, kind, default, **kw)


REGISTRY: Dict[str, Setting] = dict([
    _s("seed", "int", DEFAULT_SEEDS[0], minimum=0, help="master seed of a single run"),
    _s("seeds", "int_list", list(DEFAULT_SEEDS), help="seeds of a sweep"),
    _s("experiment.run_id", "str", "auto"),
    _s("experiment.output_dir", "str", "auto"),
    _s("experiment.save_artifacts", "bool", True),
    _s("dataset.kind", "choice", "toy", choices=("toy", "idx")),
    _s("dataset.num_classes", "int", 8, minimum=1),
    _s("dataset.per_class", "int", 250, minimum=1),
    _s("dataset.channels", "int", 1, minimum=1),
    _s("dataset.height", "int", 16, minimum=4),
    _s("dataset.width", "int", 16, minimum=4),
    _s("dataset.noise", "float", 0.15, minimum=0.0),
    _s("dataset.test_fraction", "float", 0.2, minimum=0.0, maximum=0.95),
    _s("dataset.train_images", "str", ""),
    _s("dataset.train_labels", "str", ""),
    _s("dataset.test_images", "str", ""),
    _s("dataset.test_labels", "str", ""),
    _s("dataset.normalize", "bool", False, help="per-channel standardization of IDX pixels"),
    _s("split.num_tasks", "int", 2, minimum=1),
    _s("partition.num_clients", "int", 5, minimum=1),
    _s("partition.beta", "beta", "iid"),
    _s("partition.seed", "auto_int", None, minimum=0),
    _s("model.width", "int", 8, minimum=1),
    _s("fed.rounds", "int", 20, minimum=0),
    _s("fed.fraction", "float", 1.0, minimum=0.0, maximum=1.0, exclusive_min=True),
    _s("fed.epochs", "int", 2, minimum=0),
    _s("fed.batch", "int", 32, minimum=1),
    _s("fed.lr", "float", 0.01, minimum=0.0),
    _s("fed.momentum", "float", 0.9, minimum=0.0, maximum=1.0),
    _s("fed.weight_decay", "float", 5e-4, minimum=0.0),
    _s("fed.alpha", "auto_float", None, minimum=0.0),
    _s("fed.warm_start", "bool", True),
    _s("fed.teacher", "choice", "frozen", choices=TEACHER_MODES),
    _s("fed.workers", "int", 1, minimum=1),
    _s("strategy.name", "choice", "target", choices=STRATEGY_NAMES),
    _s("lwf.alpha", "float", 1.0, minimum=0.0),
    _s("ewc.lambda", "float", 100.0, minimum=0.0),
    _s("ewc.fisher_batches", "int", 10, minimum=1),
    _s("replay.budget", "int", 20, minimum=0),
    _s("replay.global_budget", "auto_int", None, minimum=0),
    _s("target.noise_dim", "int", 64, minimum=1),
    _s("target.batch", "int", 64, minimum=1),
    _s("target.gen_steps", "int", 5, minimum=0),
    _s("target.gen_optimizer", "choice", "adam", choices=GEN_OPTIMIZERS),
    _s("target.lr_g", "float", 5e-3, minimum=0.0),
    _s("target.gen_momentum", "float", 0.9, minimum=0.0, maximum=1.0),
    _s("target.lr_s", "float", 0.01, minimum=0.0),
    _s("target.student_momentum", "float", 0.9, minimum=0.0, maximum=1.0),
    _s("target.lambda_div", "float", 1.0, minimum=0.0),
    _s("target.lambda_bn", "float", 1.0, minimum=0.0),
    _s("target.capacity", "auto_int", None, minimum=1),
    _s("target.capacity_per_class", "int", 40, minimum=1),
    _s("target.rounds", "auto_int", None, minimum=0),
    _s("target.min_rounds", "int", 30, minimum=0),
    _s("target.student_steps", "int", 10, minimum=0),
    _s("metrics.clamp", "bool", True),
    _s("metrics.per_round", "bool", False),
    _s("sweep.workers", "int", 1, minimum=1),
])

# keys that only matter to one strategy family
_OWNED = {
    "ewc.": ("fedewc",),
    "replay.": ("replay_local", "replay_global"),
    "target.": ("target",),
    "lwf.": ("fedlwf",),
    "fed.alpha": ("target",),
}


# ---------- parsing ----------

def parse_config_text(text: str, source: str = "<text>") -> Dict[str, str]:
    out: Dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"[exp_config] {source}:{n}: expected 'key = value', got '{line.strip()}'")
        key, value = (p.strip() for p in body.split("=", 1))
        if not key:
            raise ConfigError(f"[exp_config] {source}:{n}: empty key")
        out[key] = value
    return out


def load_config_file(path: Union[str, Path]) -> Dict[str, str]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"[exp_config] config file not found: {p}")
    return parse_config_text(p.read_text(encoding="utf-8"), source=str(p))


def parse_overrides(items: Iterable[str]) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"[exp_config] override must be key=value, got '{item}'")
        key, value = (p.strip() for p in item.split("=", 1))
        out[key] = value
    return out


def _bounds(s: Setting, v: float) -> None:
    lo_bad = s.minimum is not None and (v <= s.minimum if s.exclusive_min else v < s.minimum)
    hi_bad = s.maximum is not None and v > s.maximum
    if lo_bad or hi_bad:
        lo = "(" if s.exclusive_min else "["
        hi = "inf)" if s.maximum is None else f"{s.maximum}]"
        raise ConfigError(f"[exp_config] {s.key} = {v} is outside {lo}{s.minimum}, {hi}")


def parse_value(s: Setting, raw: Any) -> Any:
    """Raw string (or already-typed value) -> typed value within the setting's domain."""
    text = str(raw).strip() if not isinstance(raw, (list, tuple)) else ",".join(str(x) for x in raw)
    try:
        if s.kind in ("auto_int", "auto_float"):
            if raw is None or text.lower() == "auto":
                return None
            v = int(text) if s.kind == "auto_int" else float(text)
            _bounds(s, v)
            return v
        if s.kind == "int":
            v = int(text)
            _bounds(s, v)
            return v
        if s.kind == "float":
            v = float(text)
            _bounds(s, v)
            return v
        if s.kind == "bool":
            if isinstance(raw, bool):
                return raw
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ConfigError(f"[exp_config] {s.key} expects true/false, got '{text}'")
        if s.kind == "choice":
            v = text.lower()
            if v not in s.choices:
                raise ConfigError(f"[exp_config] {s.key} must be one of {list(s.choices)}, got '{text}'")
            return v
        if s.kind == "int_list":
            vals = [int(x) for x in text.split(",") if x.strip()]
            if not vals:
                raise ConfigError(f"[exp_config] {s.key} needs at least one integer")
            return vals
        if s.kind == "beta":
            if text.lower() == "iid":
                return "iid"
            v = float(text)
            if not v > 0:
                raise ConfigError(f"[exp_config] {s.key} must be > 0 or 'iid', got '{text}'")
            return v
        return text
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"[exp_config] {s.key}: cannot parse '{text}' as {s.kind}") from e


def format_value(v: Any) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


# ---------- normalized config ----------

@dataclass(frozen=True)
class ExperimentConfig:
    values: Mapping[str, Any] = field(default_factory=dict)

    def __getitem__(self, key: str) -> Any:
        if key not in REGISTRY:
            raise ConfigError(f"[exp_config] unknown key '{key}'")
        return self.values.get(key, REGISTRY[key].default)

    def get(self, key: str, default: Any = None) -> Any:
        return self.values.get(key, default)

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(self[k])}\n" for k in sorted(REGISTRY))

    def as_dict(self) -> Dict[str, Any]:
        return {k: self[k] for k in sorted(REGISTRY)}

    def with_overrides(self, overrides: Mapping[str, Any]) -> "ExperimentConfig":
        raw: Dict[str, Any] = dict(self.values)
        raw.update(overrides)
        cfg, _ = normalize_config(raw)
        return cfg

    # ---- resolved views ----
    @property
    def strategy(self) -> str:
        return self["strategy.name"]

    @property
    def partition_seed(self) -> int:
        ps = self["partition.seed"]
        return int(self["seed"]) if ps is None else int(ps)

    def resolved_alpha(self) -> float:
        a = self["fed.alpha"]
        if a is not None:
            return float(a)
        return 10.0 if int(self["split.num_tasks"]) <= 2 else 100.0

    def input_shape(self) -> Tuple[int, int, int]:
        return (int(self["dataset.channels"]), int(self["dataset.height"]), int(self["dataset.width"]))

    def fed_config(self) -> FedConfig:
        return FedConfig(
            rounds=self["fed.rounds"],
            fraction=self["fed.fraction"],
            epochs=self["fed.epochs"],
            batch_size=self["fed.batch"],
            lr=self["fed.lr"],
            momentum=self["fed.momentum"],
            weight_decay=self["fed.weight_decay"],
            warm_start=self["fed.warm_start"],
            teacher=self["fed.teacher"],
            workers=self["fed.workers"],
            eval_per_round=self["metrics.per_round"],
        )

    def inversion_config(self) -> InversionConfig:
        cap = self["target.capacity"]
        return InversionConfig(
            noise_dim=self["target.noise_dim"],
            batch_size=self["target.batch"],
            gen_steps=self["target.gen_steps"],
            gen_optimizer=self["target.gen_optimizer"],
            lr_g=self["target.lr_g"],
            gen_momentum=self["target.gen_momentum"],
            lr_s=self["target.lr_s"],
            student_momentum=self["target.student_momentum"],
            lambda_div=self["target.lambda_div"],
            lambda_bn=self["target.lambda_bn"],
            capacity=int(cap) if cap is not None else InversionConfig().capacity,
            rounds=self["target.rounds"],
            min_rounds=self["target.min_rounds"],
            student_steps=self["target.student_steps"],
        )

    def strategy_options(self) -> Dict[str, Any]:
        name = self.strategy
        if name == "fedlwf":
            return {"alpha": self["lwf.alpha"]}
        if name == "fedewc":
            return {"lam": self["ewc.lambda"], "fisher_batches": self["ewc.fisher_batches"]}
        if name.startswith("replay_"):
            return {"budget": self["replay.budget"], "global_budget": self["replay.global_budget"]}
        if name == "target":
            per_class = None if self["target.capacity"] is not None else self["target.capacity_per_class"]
            return {"alpha": self.resolved_alpha(), "inversion": self.inversion_config(),
                    "capacity_per_class": per_class}
        return {}


def normalize_config(raw: Mapping[str, Any]) -> Tuple[ExperimentConfig, List[str]]:
    """
    Validate every key against its declared domain and return the typed config.

    Raises ConfigError on unknown keys, unparsable or out-of-domain values and
    on cross-key conflicts that would fail later (class/task divisibility,
    missing IDX paths).
    """
    unknown = sorted(k for k in raw if k not in REGISTRY)
    if unknown:
        raise ConfigError(f"[exp_config] unknown key(s): {unknown}")
    values = {k: parse_value(REGISTRY[k], v) for k, v in raw.items()}
    cfg = ExperimentConfig(values)
    warnings: List[str] = []

    if cfg["dataset.kind"] == "idx":
        for k in ("dataset.train_images", "dataset.train_labels", "dataset.test_images", "dataset.test_labels"):
            if not cfg[k]:
                raise ConfigError(f"[exp_config] dataset.kind = idx requires {k}")
    else:
        if cfg["dataset.num_classes"] % cfg["split.num_tasks"]:
            raise ConfigError(
                f"[exp_config] {cfg['dataset.num_classes']} classes do not divide into {cfg['split.num_tasks']} tasks"
            )
        if cfg["dataset.num_classes"] < cfg["split.num_tasks"]:
            raise ConfigError("[exp_config] split.num_tasks exceeds dataset.num_classes")
    if cfg.strategy == "target" and (cfg["dataset.height"] % 4 or cfg["dataset.width"] % 4):
        raise ConfigError("[exp_config] the generator needs image height and width divisible by 4")
    cap = cfg["target.capacity"]
    if cfg.strategy == "target" and cap is not None and cap < cfg["target.batch"]:
        raise ConfigError(f"[exp_config] target.capacity {cap} is smaller than target.batch {cfg['target.batch']}")

    for prefix, owners in _OWNED.items():
        if cfg.strategy in owners:
            continue
        set_keys = sorted(k for k in raw if k == prefix or (prefix.endswith(".") and k.startswith(prefix)))
        if set_keys:
            warnings.append(f"{set_keys} ignored by strategy '{cfg.strategy}'.")
    return cfg, warnings


def resolve_config(
    path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = ()
) -> Tuple[ExperimentConfig, List[str]]:
    raw: Dict[str, Any] = load_config_file(path) if path else {}
    raw.update(parse_overrides(overrides))
    return normalize_config(raw)
