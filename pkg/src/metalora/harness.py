"""Experiment orchestration behind the CLI: train, evaluate, compare."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .config import RunConfig
from .errors import ComparisonError, ContractError, DivergenceError
from .lora import AdapterSet, check_compatible, save_adapters
from .trainer import (
    FULL, JOINT, STA, TrainRecord, evaluate_adaptation, examples_consumed,
    examples_per_iteration, run_joint_baseline, run_meta_training, run_sta_training,
)

log = logging.getLogger("metalora")

METHODS = ("meta", "sta", "joint", "random-init")
_MODE = {"meta": FULL, "sta": STA, "joint": JOINT}
_LABEL = {"meta": "MeTA-LoRA", "sta": "-STA", "joint": "LoRA (joint)", "random-init": "random init"}

ADAPTER_FILE = "adapter.mllw"
METRICS_FILE = "metrics.jsonl"
SUMMARY_FILE = "summary.json"
CSV_HEADER = ["method", "seed_count", "mean_query_mse", "sd_query_mse", "examples_consumed"]


def _check_method(method: str) -> None:
    if method not in METHODS:
        raise ContractError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")


def expected_examples(cfg: RunConfig, method: str) -> int:
    if method == "random-init":
        return 0
    return cfg.meta.iterations * examples_per_iteration(cfg.training_config(), _MODE[method])


def _sd(values: Sequence[float]) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def _json_line(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True) + "\n"


@dataclass
class TrainOutcome:
    adapters: AdapterSet
    records: list[TrainRecord]
    summary: dict[str, Any]


def train(cfg: RunConfig, method: str = "meta", out_dir: str | os.PathLike | None = None) -> TrainOutcome:
    """Train one method; with ``out_dir`` write adapter, metrics and summary there.

    Metrics are streamed line by line, so a diverged run keeps its partial
    history. The DivergenceError is re-raised after the summary is written.
    """
    _check_method(method)
    model, suite = cfg.build()
    meta = cfg.training_config()
    out = Path(out_dir) if out_dir is not None else None
    metrics = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics = open(out / METRICS_FILE, "w")

    def on_record(rec: TrainRecord) -> None:
        if metrics is not None:
            metrics.write(_json_line(rec.to_json()))
            metrics.flush()
        if rec.iteration % 100 == 0:
            log.info("iter %d  query %s  |g| %.3e", rec.iteration,
                     " ".join(f"{q:.4f}" for q in rec.query_losses), rec.grad_norm)

    status, error, records = "ok", None, []
    adapters = cfg.init_adapters(model)
    try:
        if method == "random-init":
            pass
        elif method == "meta":
            adapters, records = run_meta_training(model, suite, meta, on_record=on_record)
        elif method == "sta":
            adapters, records = run_sta_training(model, suite, meta, on_record=on_record)
        else:
            adapters, records = run_joint_baseline(model, suite, meta, on_record=on_record)
    except DivergenceError as exc:
        status, error = "diverged", str(exc)
        records = getattr(exc, "records", [])
        raise_later = exc
    else:
        raise_later = None
    finally:
        if metrics is not None:
            metrics.close()

    consumed = examples_consumed(records)
    summary = {
        "method": method,
        "status": status,
        "config": cfg.to_dict(),
        "iterations_completed": len(records),
        "final_query_losses": records[-1].query_losses if records else [],
        "final_support_losses": records[-1].support_losses if records else [],
        "budget": {"tasks_per_iteration": meta.n, "n_support": meta.n_support,
                   "n_query": meta.n_query, "iterations": meta.iterations,
                   "examples_consumed": consumed,
                   "examples_expected": expected_examples(cfg, method)},
    }
    if error:
        summary["error"] = error
    if status == "ok" and consumed != summary["budget"]["examples_expected"]:
        raise ContractError(f"budget ledger mismatch: consumed {consumed}, "
                            f"expected {summary['budget']['examples_expected']}")
    if out is not None:
        if status == "ok":
            save_adapters(out / ADAPTER_FILE, adapters)
        (out / SUMMARY_FILE).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if raise_later is not None:
        raise raise_later
    return TrainOutcome(adapters, records, summary)


@dataclass
class EvalReport:
    """Post-adaptation query loss per held-out task, plus its aggregates."""

    method: str
    task_ids: list[int]
    per_task: list[float]
    zero_shot: list[float]
    seeds: list[int]
    examples_consumed: int = 0
    mean: float = field(init=False)
    sd: float = field(init=False)

    def __post_init__(self) -> None:
        self.mean = float(np.mean(self.per_task))
        self.sd = _sd(self.per_task)

    def to_dict(self) -> dict[str, Any]:
        return {"method": self.method, "mean_query_loss": self.mean, "sd_query_loss": self.sd,
                "zero_shot_mean": float(np.mean(self.zero_shot)) if self.zero_shot else None,
                "examples_consumed": self.examples_consumed, "seeds": self.seeds,
                "task_ids": self.task_ids, "per_task": self.per_task, "zero_shot": self.zero_shot}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> EvalReport:
        return cls(d["method"], list(d["task_ids"]), list(d["per_task"]), list(d["zero_shot"]),
                   list(d["seeds"]), int(d.get("examples_consumed", 0)))


def evaluate(cfg: RunConfig, adapters: AdapterSet, method: str = "meta",
             examples: int = 0) -> EvalReport:
    model, suite = cfg.build()
    check_compatible(model, adapters)
    res = evaluate_adaptation(model, suite, adapters, cfg.training_config(),
                              cfg.eval.held_out, cfg.eval.eval_seed)
    return EvalReport(method, res.task_ids, res.post_adaptation, res.zero_shot,
                      [cfg.seed, cfg.eval.eval_seed], examples)


# ---------------------------------------------------------------------------
# comparison

_PARITY_FIELDS = ("n", "n_support", "n_query", "iterations")


def check_comparable(configs: Mapping[str, RunConfig]) -> None:
    """Refuse to tabulate runs whose suite, model, adapter or evaluation differ."""
    items = list(configs.items())
    base_name, base = items[0]
    for name, cfg in items[1:]:
        diffs = [sec for sec in ("suite", "model", "adapter", "eval")
                 if getattr(cfg, sec) != getattr(base, sec)]
        diffs += [f"meta.{f}" for f in _PARITY_FIELDS if getattr(cfg.meta, f) != getattr(base.meta, f)]
        if diffs:
            raise ComparisonError(f"{name} and {base_name} differ in {', '.join(diffs)}; "
                                  "comparisons need identical suite, model and budget settings")


def check_budget_parity(budgets: Mapping[str, int], allow_mismatch: bool = False) -> None:
    trained = {m: b for m, b in budgets.items() if m != "random-init"}
    if len(set(trained.values())) > 1 and not allow_mismatch:
        detail = ", ".join(f"{m}={b}" for m, b in trained.items())
        raise ComparisonError(f"example budgets differ ({detail}); set meta.sta_include_support "
                              "for a budget-matched -STA run or pass --allow-budget-mismatch")


@dataclass
class CompareRow:
    method: str
    per_seed: list[float]
    seeds: list[int]
    examples_consumed: int
    reports: list[EvalReport] = field(default_factory=list, repr=False)

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_seed))

    @property
    def sd(self) -> float:
        return _sd(self.per_seed)


def compare(configs: Mapping[str, RunConfig], allow_budget_mismatch: bool = False) -> list[CompareRow]:
    """Train and evaluate each method once per seed in ``eval.seeds``."""
    for m in configs:
        _check_method(m)
    check_comparable(configs)
    check_budget_parity({m: expected_examples(c, m) for m, c in configs.items()}, allow_budget_mismatch)
    rows = []
    for method, cfg in configs.items():
        per_seed, reports, consumed = [], [], 0
        for seed in cfg.eval.seeds:
            run_cfg = cfg.with_seed(seed)
            log.info("%s seed %d", method, seed)
            outcome = train(run_cfg, method)
            consumed = outcome.summary["budget"]["examples_consumed"]
            report = evaluate(run_cfg, outcome.adapters, method, consumed)
            reports.append(report)
            per_seed.append(report.mean)
        rows.append(CompareRow(method, per_seed, list(cfg.eval.seeds), consumed, reports))
    return rows


def rows_csv(rows: Sequence[CompareRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([r.method, len(r.per_seed), repr(r.mean), repr(r.sd), r.examples_consumed])
    return buf.getvalue()


def rows_table(rows: Sequence[CompareRow]) -> str:
    best = min(r.mean for r in rows)
    body = [("Method", "Query loss (mean ± sd)", "Examples", "Seeds")]
    for r in rows:
        mark = " *" if math.isclose(r.mean, best, rel_tol=0, abs_tol=0) else ""
        body.append((_LABEL.get(r.method, r.method), f"{r.mean:.4f} ± {r.sd:.4f}{mark}",
                     str(r.examples_consumed), str(len(r.per_seed))))
    widths = [max(len(row[i]) for row in body) for i in range(4)]
    fmt = lambda row: " | ".join(c.ljust(w) for c, w in zip(row, widths))  # noqa: E731
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([fmt(body[0]), sep] + [fmt(b) for b in body[1:]] + ["* best (lowest) per column"])
