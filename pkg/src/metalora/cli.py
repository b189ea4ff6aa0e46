"""Command-line entry point: ``metalora <verb> [--config FILE] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .config import PRESETS, RunConfig, load_config
from .errors import BindingError, ComparisonError, ConfigError, ContractError, DivergenceError, ShapeError
from .gradcheck import format_results, timed_gradcheck
from .lora import load_adapters
from .tasks import export_episodes_jsonl

log = logging.getLogger("metalora")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--preset", choices=sorted(PRESETS), help="base preset (default: sinusoid)")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--out", help="output directory (default: config out_dir)")
    p.add_argument("--quiet", action="store_true", help="only print results")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="metalora", parents=[common],
                                     description="Meta-trained LoRA adapters at desk scale.")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", parents=[common], help="train a shared adapter")
    p.add_argument("--method", choices=["meta", "sta", "joint"], default=None,
                   help="training method (default: meta, or sta if meta.variant is 'sta')")

    p = sub.add_parser("evaluate", parents=[common], help="adapt-and-score on held-out tasks")
    p.add_argument("--adapter", required=True, help="adapter file written by train")
    p.add_argument("--method", default="meta", help="tag stored in the report")

    p = sub.add_parser("compare", parents=[common], help="compare methods over seeds")
    p.add_argument("--methods", default="meta,joint,random-init",
                   help="comma-separated subset of meta,sta,joint,random-init")
    p.add_argument("--method-config", action="append", default=[], metavar="METHOD=FILE",
                   help="per-method config file (must match the base suite/model/budget)")
    p.add_argument("--allow-budget-mismatch", action="store_true")

    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every primitive")

    p = sub.add_parser("export-suite", parents=[common], help="write episodes as JSON lines")
    p.add_argument("--episodes", type=int, default=1, help="episodes per task")
    p.add_argument("--held-out", action="store_true", help="export held-out tasks instead")
    return parser


def _config(args) -> RunConfig:
    cfg = load_config(args.config, args.preset)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def cmd_train(args) -> int:
    cfg = _config(args)
    method = args.method or ("sta" if cfg.meta.variant == "sta" else "meta")
    try:
        outcome = harness.train(cfg, method, cfg.out_dir)
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    b = outcome.summary["budget"]
    print(f"{method}: {outcome.summary['iterations_completed']} iterations, "
          f"{b['examples_consumed']} examples -> {Path(cfg.out_dir) / harness.ADAPTER_FILE}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    adapters = load_adapters(args.adapter)
    report = harness.evaluate(cfg, adapters, args.method)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"eval_{args.method}.json"
    path.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    print(f"{args.method}: query loss {report.mean:.6f} ± {report.sd:.6f} "
          f"over {len(report.per_task)} held-out tasks -> {path}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _config(args)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    overrides = {}
    for item in args.method_config:
        name, sep, path = item.partition("=")
        if not sep:
            raise ConfigError(f"--method-config expects METHOD=FILE, got {item!r}")
        overrides[name] = load_config(path)
    configs = {}
    for m in methods:
        c = overrides.get(m, cfg)
        if args.seed is not None:
            c = c.with_seed(args.seed)
        configs[m] = c
    rows = harness.compare(configs, args.allow_budget_mismatch)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = harness.rows_table(rows)
    (out / "compare.csv").write_text(harness.rows_csv(rows))
    (out / "compare.txt").write_text(table + "\n")
    (out / "compare.json").write_text(json.dumps(
        {r.method: [rep.to_dict() for rep in r.reports] for r in rows}, indent=2) + "\n")
    print(table)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results, elapsed = timed_gradcheck()
    print(format_results(results, elapsed))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def cmd_export_suite(args) -> int:
    cfg = _config(args)
    suite = cfg.build_suite()
    tasks = suite.held_out(cfg.eval.held_out) if args.held_out else list(suite)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / ("suite_held_out.jsonl" if args.held_out else "suite.jsonl")
    n = export_episodes_jsonl(path, tasks, cfg.meta.n_support, cfg.meta.n_query, range(args.episodes))
    print(f"wrote {n} examples to {path}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "compare": cmd_compare,
            "gradcheck": cmd_gradcheck, "export-suite": cmd_export_suite}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr, force=True)
    try:
        return COMMANDS[args.verb](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ComparisonError, BindingError, ShapeError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
