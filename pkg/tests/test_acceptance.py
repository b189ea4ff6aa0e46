"""Acceptance criteria, one test each; a PASS/FAIL line per criterion is printed in the summary."""

import dataclasses
import json
import shutil
import time

import numpy as np
import pytest

from metalora import harness, trainer
from metalora.cli import main
from metalora.config import load_config
from metalora.gradcheck import REGISTRY, timed_gradcheck
from metalora.lora import init_adapters, merge_adapter
from metalora.nn import build_attention_classifier, build_linear
from metalora.tasks import make_shared_lowrank_suite
from metalora.tensor import Tensor
from metalora.trainer import MetaConfig, run_meta_training, run_sta_training

SEEDS = (0, 1, 2)


def record(log, number, title, ok, detail):
    log.append(f"[{'PASS' if ok else 'FAIL'}] {number}. {title}: {detail}")
    assert ok, detail


# ---------------------------------------------------------------------------
# 1


def test_c1_gradient_correctness(acceptance_log):
    results, elapsed = timed_gradcheck(points=20, tol=1e-5, h=1e-6)
    worst = max(r.max_rel_error for r in results)
    failed = [r.name for r in results if not r.passed]
    ok = not failed and elapsed < 60 and all(r.points >= 20 for r in results)
    record(acceptance_log, 1, "gradient correctness", ok,
           f"{len(results) - len(failed)}/{len(REGISTRY)} primitives, max rel err {worst:.2e} "
           f"(< 1e-5), {elapsed:.1f}s (< 60s)" + (f", failed {failed}" if failed else ""))


# ---------------------------------------------------------------------------
# 2: closed-form first-order meta-gradient for a linear model with one adapter


def _dloss_dweight(w, x, y):
    r = x @ w.T - y
    return 2.0 * r.T @ x / r.size


def _oracle_task_grad(w0, s, A, B, ep, alpha, k):
    A, B = A.copy(), B.copy()
    for _ in range(k):
        g = _dloss_dweight(w0 + s * B @ A, ep.support_x, ep.support_y)
        A, B = A - alpha * s * B.T @ g, B - alpha * s * g @ A.T
    g = _dloss_dweight(w0 + s * B @ A, ep.query_x, ep.query_y)
    return {"linear.lora_A": s * B.T @ g, "linear.lora_B": s * g @ A.T}


def test_c2_first_order_contract(acceptance_log, monkeypatch):
    rng = np.random.default_rng(2024)
    worst, checked = 0.0, 0
    for c in range(10):
        d = int(rng.integers(3, 9))
        r_true = int(rng.integers(1, d))
        suite = make_shared_lowrank_suite(int(rng.integers(3, 8)), d, r_true, seed=c)
        cfg = MetaConfig(alpha=float(rng.uniform(0.005, 0.2)), beta=float(rng.uniform(1e-3, 5e-2)),
                         k=int(rng.integers(0, 5)), n=int(rng.integers(1, 4)),
                         n_support=int(rng.integers(1, 10)), n_query=int(rng.integers(1, 10)),
                         iterations=3, seed=c, rank=int(rng.integers(1, d + 1)),
                         scale=float(rng.uniform(0.5, 4.0)), targets=("linear",))
        model = build_linear(suite.settings["W0"])
        w0 = suite.settings["W0"]
        drawn, applied = [], []
        real_sample, real_update = trainer.sample_episode, trainer.meta_update

        def sample(*a, **kw):
            ep = real_sample(*a, **kw)
            drawn.append(ep)
            return ep

        def update(shared, gradients, state, beta):
            ad = shared["linear"]
            applied.append((ad.A.data.copy(), ad.B.data.copy(), ad.scale,
                            trainer.average_gradients(gradients), list(drawn)))
            drawn.clear()
            return real_update(shared, gradients, state, beta)

        monkeypatch.setattr(trainer, "sample_episode", sample)
        monkeypatch.setattr(trainer, "meta_update", update)
        run_meta_training(model, suite, cfg)
        monkeypatch.undo()

        assert len(applied) == cfg.iterations
        for A, B, s, got, episodes in applied:
            per_task = [_oracle_task_grad(w0, s, A, B, ep, cfg.alpha, cfg.k) for ep in episodes]
            for name in got:
                expect = sum(g[name] for g in per_task) / len(per_task)
                worst = max(worst, float(np.max(np.abs(got[name] - expect))))
            checked += 1
    record(acceptance_log, 2, "first-order contract", worst < 1e-10,
           f"10 random configs, {checked} meta-steps, max abs diff {worst:.2e} (< 1e-10)")


# ---------------------------------------------------------------------------
# 3


def test_c3_merge_equivalence(acceptance_log):
    model = build_attention_classifier(vocab=8, d_model=32, head_count=2, seed=7)
    targets = ["attn.q", "attn.k", "attn.v", "attn.o"]
    adapters = init_adapters(model, targets, r=4, s=2.0, rng_seed=7)
    rng = np.random.default_rng(7)
    for ad in adapters.values():
        ad.A.data = rng.uniform(-0.5, 0.5, size=ad.A.shape)
        ad.B.data = rng.uniform(-0.5, 0.5, size=ad.B.shape)
    merged = merge_adapter(model, adapters)
    worst = 0.0
    for _ in range(50):
        x = Tensor(rng.normal(size=(1, 6, 8)))
        worst = max(worst, float(np.max(np.abs(merged(x).data - model(x, adapters).data))))
    record(acceptance_log, 3, "merge equivalence", worst < 1e-10,
           f"50 inputs, Q/K/V/O adapters, max abs diff {worst:.2e} (< 1e-10)")


# ---------------------------------------------------------------------------
# 4


def test_c4_structural_equivalences(acceptance_log, monkeypatch):
    checks = {}
    for preset in ("sinusoid", "lowrank"):
        cfg = load_config(preset=preset)
        model, suite = cfg.build()
        meta = dataclasses.replace(cfg.training_config(), iterations=25)

        full, rf = run_meta_training(model, suite, dataclasses.replace(meta, k=0))
        sta, rs = run_sta_training(model, suite, meta)
        checks[f"{preset}: k=0 == -STA"] = (
            full.state().keys() == sta.state().keys()
            and all(full.state()[n].tobytes() == sta.state()[n].tobytes() for n in full.state())
            and [r.trajectory() for r in rf] == [r.trajectory() for r in rs])

        init = cfg.init_adapters(model)
        for label, variant in (("beta=0", dict(beta=0.0)), ("0 iterations", dict(iterations=0))):
            out, _ = run_meta_training(model, suite, dataclasses.replace(meta, **variant))
            checks[f"{preset}: {label}"] = all(
                out.state()[n].tobytes() == init.state()[n].tobytes() for n in init.state())

        real, seen = trainer.adapt_with_trace, []

        def watched(model, shared, *a, **kw):
            before = {n: v.tobytes() for n, v in shared.state().items()}
            out = real(model, shared, *a, **kw)
            seen.append(before == {n: v.tobytes() for n, v in shared.state().items()})
            return out

        monkeypatch.setattr(trainer, "adapt_with_trace", watched)
        run_meta_training(model, suite, meta)
        monkeypatch.undo()
        checks[f"{preset}: Phase I leaves shared intact"] = len(seen) == 50 and all(seen)
    failed = [k for k, v in checks.items() if not v]
    record(acceptance_log, 4, "algorithm-structure equivalences", not failed,
           f"{len(checks) - len(failed)}/{len(checks)} bit-level checks" + (f", failed {failed}" if failed else ""))


# ---------------------------------------------------------------------------
# 5


def _run(cfg, method):
    start = time.perf_counter()
    outcome = harness.train(cfg, method)
    seconds = time.perf_counter() - start
    report = harness.evaluate(cfg, outcome.adapters, method, outcome.summary["budget"]["examples_consumed"])
    return report, outcome, seconds


def test_c5_ablation_direction(acceptance_log):
    base = load_config(preset="lowrank")
    s = base.suite
    assert (s.num_tasks, s.d, s.r_true, s.noise) == (10, 8, 2, 0.0)
    meta, sta, slowest = [], [], 0.0
    for seed in SEEDS:
        cfg = base.with_seed(seed)
        rm, _, tm = _run(cfg, "meta")
        rs, _, ts = _run(cfg, "sta")
        meta.append(rm.mean)
        sta.append(rs.mean)
        slowest = max(slowest, tm, ts)
    strict = sum(m < s for m, s in zip(meta, sta))
    ok = np.mean(meta) <= np.mean(sta) and strict >= 2 and slowest < 300
    record(acceptance_log, 5, "ablation direction", ok,
           f"query MSE MeTA {np.mean(meta):.4f} vs -STA {np.mean(sta):.4f}; per seed "
           + ", ".join(f"{m:.3f}/{s:.3f}" for m, s in zip(meta, sta))
           + f"; strict on {strict}/3 seeds; slowest run {slowest:.1f}s (< 300s)")


# ---------------------------------------------------------------------------
# 6 and 7 share the sinusoid runs


@pytest.fixture(scope="module")
def sinusoid_runs():
    base = load_config(preset="sinusoid")
    runs = {m: [] for m in ("meta", "joint", "random-init")}
    for seed in SEEDS:
        for method in runs:
            runs[method].append(_run(base.with_seed(seed), method))
    return base, runs


def test_c6_data_efficiency(acceptance_log, sinusoid_runs):
    base, runs = sinusoid_runs
    mean = {m: float(np.mean([r[0].mean for r in rs])) for m, rs in runs.items()}
    held = {len(r[0].per_task) for rs in runs.values() for r in rs}
    budgets = {m: {r[0].examples_consumed for r in rs} for m, rs in runs.items()}
    reduction = 1.0 - mean["meta"] / mean["random-init"]
    per_seed = [1.0 - a[0].mean / b[0].mean for a, b in zip(runs["meta"], runs["random-init"])]
    ok = (mean["meta"] < mean["joint"] and mean["meta"] < mean["random-init"]
          and reduction >= 0.30 and held == {100} and budgets["meta"] == budgets["joint"])
    record(acceptance_log, 6, "data-efficiency direction", ok,
           f"query MSE MeTA {mean['meta']:.3f}, joint {mean['joint']:.3f}, random-init "
           f"{mean['random-init']:.3f}; reduction vs random-init {reduction:.1%} (>= 30%), per seed "
           + ", ".join(f"{p:.1%}" for p in per_seed)
           + f"; budgets meta {sorted(budgets['meta'])} joint {sorted(budgets['joint'])}")


def test_c7_budget_ledger(acceptance_log, sinusoid_runs):
    base, runs = sinusoid_runs
    m = base.meta
    assert (m.n, m.n_support, m.n_query, m.iterations) == (2, 8, 8, 1000)
    consumed = [r[1].summary["budget"]["examples_consumed"] for r in runs["meta"] + runs["joint"]]
    # the formula at other iteration counts too
    cfg = load_config(preset="lowrank")
    model, suite = cfg.build()
    extra = []
    for iters, n, ns, nq in ((1, 1, 1, 1), (17, 3, 5, 2), (40, 2, 8, 8)):
        meta = dataclasses.replace(cfg.training_config(), iterations=iters, n=n, n_support=ns, n_query=nq)
        _, records = run_meta_training(model, suite, meta)
        extra.append(trainer.examples_consumed(records) == iters * n * (ns + nq))
    ok = set(consumed) == {32_000} and all(extra)
    record(acceptance_log, 7, "budget ledger", ok,
           f"1000 iterations x 2 tasks x (8+8) -> {sorted(set(consumed))} (expected [32000]) over "
           f"{len(consumed)} runs; formula holds at {sum(extra)}/{len(extra)} other settings")


# ---------------------------------------------------------------------------
# 8


def _strip_time(text):
    out = []
    for line in text.splitlines():
        rec = json.loads(line)
        rec.pop("elapsed_ms")
        out.append(json.dumps(rec, sort_keys=True))
    return out


def test_c8_determinism(acceptance_log, tmp_path):
    cfg_path = tmp_path / "run.json"
    cfg_path.write_text(json.dumps({"preset": "sinusoid", "meta": {"iterations": 200}}))
    run = tmp_path / "out"
    copies = []
    for i in range(2):
        assert main(["train", "--config", str(cfg_path), "--seed", "3", "--out", str(run), "--quiet"]) == 0
        copies.append(shutil.copytree(run, tmp_path / f"copy{i}"))
    a, b = copies
    same_adapter = (a / "adapter.mllw").read_bytes() == (b / "adapter.mllw").read_bytes()
    same_summary = (a / "summary.json").read_bytes() == (b / "summary.json").read_bytes()
    ma, mb = (a / "metrics.jsonl").read_text(), (b / "metrics.jsonl").read_text()
    same_metrics = _strip_time(ma) == _strip_time(mb) and len(ma.splitlines()) == 200
    ok = same_adapter and same_summary and same_metrics
    record(acceptance_log, 8, "determinism", ok,
           f"adapter bytes {'identical' if same_adapter else 'DIFFER'}, summary bytes "
           f"{'identical' if same_summary else 'DIFFER'}, metrics {'identical' if same_metrics else 'DIFFER'} "
           f"apart from elapsed_ms wall-clock")
