"""Run configuration: a strict JSON document plus named presets.

A config file may name a ``preset`` and override any subset of its sections.
Unknown keys anywhere are errors, so a typo in a hyperparameter name fails
loudly instead of silently falling back to a default.
"""

from __future__ import annotations

import copy
import json
import typing
from dataclasses import asdict, dataclass, field, fields
from dataclasses import replace as _replace
from typing import Any

from .errors import ConfigError
from .lora import AdapterSet, init_adapters
from .nn import Model, build_attention_classifier, build_linear, build_mlp
from .tasks import TaskSuite, make_sequence_suite, make_shared_lowrank_suite, make_sinusoid_suite
from .trainer import MetaConfig

SUITE_KINDS = ("sinusoid", "lowrank", "sequence")


@dataclass(frozen=True)
class SuiteSpec:
    kind: str = "sinusoid"
    num_tasks: int = 10
    seed: int | None = None      # None: use the run seed
    d: int = 8
    r_true: int = 2
    noise: float = 0.0
    vocab: int = 8
    seq_len: int = 6


@dataclass(frozen=True)
class ModelSpec:
    hidden: tuple[int, ...] = (64, 64, 64)
    activation: str = "tanh"
    d_model: int = 32
    heads: int = 2
    seed: int | None = None


@dataclass(frozen=True)
class AdapterSpec:
    targets: tuple[str, ...] | None = None
    rank: int = 8
    scale: float = 2.0


@dataclass(frozen=True)
class EvalSpec:
    held_out: int = 100
    eval_seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2)


@dataclass(frozen=True)
class RunConfig:
    meta: MetaConfig = field(default_factory=MetaConfig)
    suite: SuiteSpec = field(default_factory=SuiteSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    adapter: AdapterSpec = field(default_factory=AdapterSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)
    out_dir: str = "runs/default"
    preset: str | None = None

    @property
    def seed(self) -> int:
        return self.meta.seed

    def with_seed(self, seed: int) -> RunConfig:
        return _replace(self, meta=_replace(self.meta, seed=seed))

    def to_dict(self) -> dict[str, Any]:
        out = _plain(asdict(self))
        for key in _EXCLUDED["meta"]:
            out["meta"].pop(key, None)
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    # -- materialization ---------------------------------------------------

    def training_config(self) -> MetaConfig:
        """The meta config with the adapter section folded in."""
        return _replace(self.meta, rank=self.adapter.rank, scale=self.adapter.scale,
                        targets=self.adapter.targets)

    def build_suite(self) -> TaskSuite:
        s = self.suite
        seed = self.seed if s.seed is None else s.seed
        if s.kind == "sinusoid":
            return make_sinusoid_suite(s.num_tasks, seed)
        if s.kind == "lowrank":
            return make_shared_lowrank_suite(s.num_tasks, s.d, s.r_true, seed, s.noise)
        return make_sequence_suite(s.num_tasks, s.vocab, s.seq_len, seed)

    def build_model(self, suite: TaskSuite) -> Model:
        m = self.model
        seed = self.seed if m.seed is None else m.seed
        if self.suite.kind == "sinusoid":
            return build_mlp([1, *m.hidden, 1], m.activation, seed)
        if self.suite.kind == "lowrank":
            return build_linear(suite.settings["W0"])
        return build_attention_classifier(self.suite.vocab, m.d_model, m.heads, 2, seed)

    def build(self) -> tuple[Model, TaskSuite]:
        suite = self.build_suite()
        return self.build_model(suite), suite

    def init_adapters(self, model: Model) -> AdapterSet:
        a = self.adapter
        return init_adapters(model, a.targets, a.rank, a.scale, self.seed)


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


# ---------------------------------------------------------------------------
# presets

PRESETS: dict[str, dict[str, Any]] = {
    "sinusoid": {
        "suite": {"kind": "sinusoid", "num_tasks": 10},
        "model": {"hidden": [64, 64, 64], "activation": "tanh"},
        "adapter": {"targets": ["mlp.1", "mlp.2"], "rank": 8, "scale": 2.0},
        "out_dir": "runs/sinusoid",
    },
    "lowrank": {
        "suite": {"kind": "lowrank", "num_tasks": 10, "d": 8, "r_true": 2, "noise": 0.0},
        "adapter": {"targets": ["linear"], "rank": 4, "scale": 4.0},
        "out_dir": "runs/lowrank",
    },
    "sequence": {
        "suite": {"kind": "sequence", "num_tasks": 8, "vocab": 8, "seq_len": 6},
        "model": {"d_model": 32, "heads": 2},
        "adapter": {"targets": ["attn.q", "attn.k", "attn.v", "attn.o"], "rank": 4, "scale": 4.0},
        "out_dir": "runs/sequence",
    },
}

# adapter settings live in their own section
_EXCLUDED = {"meta": {"rank", "scale", "targets"}}

_SECTIONS = {"meta": MetaConfig, "suite": SuiteSpec, "model": ModelSpec,
             "adapter": AdapterSpec, "eval": EvalSpec}


def _coerce(path: str, hint, value, errors: list[str]):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(path, inner[0], value, errors)
    if origin in (tuple, list):
        if not isinstance(value, list):
            errors.append(f"{path}: expected a list, got {type(value).__name__}")
            return None
        item = args[0]
        return tuple(_coerce(f"{path}[{i}]", item, v, errors) for i, v in enumerate(value))
    if hint is bool:
        if not isinstance(value, bool):
            errors.append(f"{path}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            errors.append(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errors.append(f"{path}: expected a number, got {value!r}")
            return value
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            errors.append(f"{path}: expected a string, got {value!r}")
        return value
    errors.append(f"{path}: unsupported field type {hint}")
    return value


def _section(name: str, cls, raw: Any, errors: list[str]):
    if not isinstance(raw, dict):
        errors.append(f"{name}: expected an object, got {type(raw).__name__}")
        return cls()
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)} - _EXCLUDED.get(name, set())
    for key in raw:
        if key not in known:
            errors.append(f"{name}.{key}: unknown key (allowed: {', '.join(sorted(known))})")
    values = {k: _coerce(f"{name}.{k}", hints[k], v, errors) for k, v in raw.items() if k in known}
    try:
        return cls(**values)
    except TypeError as exc:
        errors.append(f"{name}: {exc}")
        return cls()


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def from_dict(raw: dict[str, Any]) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a JSON object")
    errors: list[str] = []
    preset = raw.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset {preset!r} (known: {', '.join(PRESETS)})")
        raw = _merge(PRESETS[preset], raw)
    allowed = set(_SECTIONS) | {"out_dir", "preset"}
    for key in raw:
        if key not in allowed:
            errors.append(f"{key}: unknown top-level key (allowed: {', '.join(sorted(allowed))})")
    parts = {name: _section(name, cls, raw.get(name, {}), errors) for name, cls in _SECTIONS.items()}
    out_dir = raw.get("out_dir", "runs/default")
    if not isinstance(out_dir, str):
        errors.append(f"out_dir: expected a string, got {out_dir!r}")
    cfg = RunConfig(out_dir=out_dir, preset=preset, **parts)
    if not errors:
        errors.extend(_semantic_errors(cfg))
    if errors:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errors))
    return cfg


def _semantic_errors(cfg: RunConfig) -> list[str]:
    errs = []
    s = cfg.suite
    if s.kind not in SUITE_KINDS:
        errs.append(f"suite.kind: must be one of {', '.join(SUITE_KINDS)}, got {s.kind!r}")
    if s.num_tasks < 1:
        errs.append(f"suite.num_tasks: must be >= 1, got {s.num_tasks}")
    if s.kind == "lowrank" and not 1 <= s.r_true <= s.d:
        errs.append(f"suite.r_true: must lie in [1, d={s.d}], got {s.r_true}")
    if s.noise < 0:
        errs.append(f"suite.noise: must be >= 0, got {s.noise}")
    if s.kind == "sequence" and (s.vocab < 4 or s.seq_len < 2):
        errs.append("suite.vocab must be >= 4 and suite.seq_len >= 2")
    if cfg.model.activation not in ("tanh", "relu"):
        errs.append(f"model.activation: must be 'tanh' or 'relu', got {cfg.model.activation!r}")
    if any(h < 1 for h in cfg.model.hidden) or (s.kind == "sinusoid" and not cfg.model.hidden):
        errs.append("model.hidden: needs at least one positive layer width")
    if cfg.model.heads < 1 or cfg.model.d_model % cfg.model.heads:
        errs.append(f"model.heads: must divide model.d_model={cfg.model.d_model}")
    if cfg.eval.held_out < 1:
        errs.append(f"eval.held_out: must be >= 1, got {cfg.eval.held_out}")
    if not cfg.eval.seeds:
        errs.append("eval.seeds: needs at least one seed")
    try:
        cfg.meta.validate(s.num_tasks)
    except ConfigError as exc:
        errs.extend(f"meta: {p}" for p in str(exc).split("; "))
    try:
        _replace(cfg.meta, rank=cfg.adapter.rank, scale=cfg.adapter.scale).validate()
    except ConfigError as exc:
        errs.extend(f"adapter: {p}" for p in str(exc).split("; ") if "rank" in p or "scale" in p)
    return errs


def load_config(path: str | None = None, preset: str | None = None) -> RunConfig:
    """Read a JSON config file; with no file, use ``preset`` (default: sinusoid)."""
    if path is None:
        return from_dict({"preset": preset or "sinusoid"})
    try:
        with open(path) as f:
            raw = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    if preset is not None and isinstance(raw, dict):
        raw = {**raw, "preset": preset}
    return from_dict(raw)
