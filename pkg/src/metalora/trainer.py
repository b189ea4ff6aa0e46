"""Two-stage meta-training of a shared LoRA adapter.

Each iteration picks ``n`` tasks. Phase I clones the shared adapter per task
and takes ``k`` SGD steps on that task's support set. Phase II evaluates the
query loss at each adapted copy, treats the adapted values as fresh leaves
(first-order: nothing flows back through the inner steps), averages the
gradients over tasks and feeds the mean to one AdamW step on the shared
adapter.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DivergenceError, ShapeError
from .lora import AdapterSet, clone_adapters, init_adapters, merge_adapter
from .nn import LOSSES, Model
from .optim import AdamWState, adamw_step, sgd_step
from .tasks import Episode, TaskSuite, sample_episode, sample_task_batch
from .tensor import Tensor

FULL, STA, JOINT = "full", "sta", "joint"
EVAL_EPISODE_BASE = 1_000_000

GradientSet = dict[str, np.ndarray]


@dataclass(frozen=True)
class MetaConfig:
    alpha: float = 1e-2          # inner (support) SGD learning rate
    beta: float = 1e-3           # outer AdamW learning rate
    k: int = 3                   # inner steps per task
    n: int = 2                   # tasks per iteration
    n_support: int = 8
    n_query: int = 8
    iterations: int = 1000
    seed: int = 0
    variant: str = FULL          # full | sta
    sta_include_support: bool = False
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    rank: int = 4
    scale: float = 1.0
    targets: tuple[str, ...] | None = None

    def validate(self, num_tasks: int | None = None) -> None:
        problems = []
        if not self.alpha >= 0:
            problems.append(f"alpha must be >= 0, got {self.alpha}")
        if not self.beta >= 0:
            problems.append(f"beta must be >= 0, got {self.beta}")
        if self.k < 0:
            problems.append(f"k must be >= 0, got {self.k}")
        if self.n < 1 or (num_tasks is not None and self.n > num_tasks):
            problems.append(f"n must lie in [1, {num_tasks}], got {self.n}")
        if self.n_support < 1 or self.n_query < 1:
            problems.append("n_support and n_query must be >= 1")
        if self.iterations < 0:
            problems.append(f"iterations must be >= 0, got {self.iterations}")
        if self.variant not in (FULL, STA):
            problems.append(f"variant must be 'full' or 'sta', got {self.variant!r}")
        if self.rank < 1:
            problems.append(f"rank must be >= 1, got {self.rank}")
        if not self.scale >= 0:
            problems.append(f"scale must be >= 0, got {self.scale}")
        if problems:
            raise ConfigError("; ".join(problems))

    def adamw_state(self, shared: AdapterSet) -> AdamWState:
        return AdamWState.for_params(shared.parameters(), beta1=self.adam_beta1,
                                     beta2=self.adam_beta2, eps=self.adam_eps,
                                     weight_decay=self.weight_decay)


# Learning rates used for the 7B/13B models; far too small for desk-scale models.
LARGE_MODEL_CONFIG = MetaConfig(alpha=5e-6, beta=2e-6, rank=16)

# (alpha factor, beta factor) relative to a base config: c1 swaps the pair's
# magnitudes, c2 is 10x larger, c3 10x smaller.
LR_GRID = {"c_base": (1.0, 1.0), "c1": (0.4, 2.5), "c2": (10.0, 10.0), "c3": (0.1, 0.1)}


def lr_grid(config: MetaConfig) -> dict[str, MetaConfig]:
    return {name: replace(config, alpha=config.alpha * fa, beta=config.beta * fb)
            for name, (fa, fb) in LR_GRID.items()}


@dataclass
class TrainRecord:
    iteration: int
    task_ids: list[int]
    support_losses: list[list[float]]
    query_losses: list[float]
    grad_norm: float
    elapsed_ms: float
    examples: int = 0

    def to_json(self) -> dict:
        return asdict(self)

    def trajectory(self) -> tuple:
        """Everything except wall-clock time."""
        return (self.iteration, tuple(self.task_ids),
                tuple(tuple(s) for s in self.support_losses),
                tuple(self.query_losses), self.grad_norm)


@dataclass
class Objective:
    """How a suite's examples become model inputs and a loss."""

    loss: str = "mse"
    encode: Callable[[np.ndarray], np.ndarray] | None = None

    @classmethod
    def for_suite(cls, suite: TaskSuite) -> Objective:
        return cls(suite.loss, suite.encode)

    def __call__(self, model: Model, adapters: Mapping | None, x: np.ndarray, y: np.ndarray) -> Tensor:
        inputs = Tensor(self.encode(x) if self.encode else x)
        out = model.forward(inputs, adapters)
        if self.loss == "mse":
            return LOSSES["mse"](out, np.asarray(y, dtype=np.float64).reshape(out.shape))
        return LOSSES[self.loss](out, y)


def _objective(objective: Objective | str | None) -> Objective:
    if objective is None:
        return Objective()
    if isinstance(objective, str):
        return Objective(objective)
    return objective


def _finite(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite {what}: {value}")
    return value


def support_loss(model: Model, adapters: Mapping | None, episode: Episode,
                 objective: Objective | str | None = None) -> Tensor:
    """Mean loss over the support set."""
    if episode.n_support == 0:
        raise ContractError("support set is empty")
    return _objective(objective)(model, adapters, episode.support_x, episode.support_y)


def query_loss(model: Model, adapters: Mapping | None, episode: Episode,
               objective: Objective | str | None = None) -> Tensor:
    if episode.n_query == 0:
        raise ContractError("query set is empty")
    return _objective(objective)(model, adapters, episode.query_x, episode.query_y)


def adapt_with_trace(model: Model, shared: AdapterSet, episode: Episode, alpha: float, k: int,
                     objective: Objective | str | None = None) -> tuple[AdapterSet, list[float]]:
    """``inner_adapt`` that also returns the support loss before and after each step."""
    objective = _objective(objective)
    local = clone_adapters(shared)
    params = local.parameters()
    losses = []
    for step in range(k):
        loss = support_loss(model, local, episode, objective)
        losses.append(_finite(loss.item(), f"support loss at inner step {step}"))
        grads = T.grad(loss, params.values())
        sgd_step(params, dict(zip(params, grads)), alpha)
    with T.no_grad():
        final = support_loss(model, local, episode, objective).item()
    losses.append(_finite(final, f"support loss after inner step {k}"))
    return local, losses


def inner_adapt(model: Model, shared: AdapterSet, episode: Episode, alpha: float, k: int,
                objective: Objective | str | None = None) -> AdapterSet:
    """Clone ``shared`` and take ``k`` SGD steps on the support loss. ``shared`` is untouched."""
    return adapt_with_trace(model, shared, episode, alpha, k, objective)[0]


def query_gradient(model: Model, adapted: AdapterSet, episode: Episode,
                   objective: Objective | str | None = None,
                   return_loss: bool = False):
    """Gradient of the query loss w.r.t. the adapted values, taken as fresh leaves."""
    leaves = adapted.clone(role="local")
    params = leaves.parameters()
    loss = query_loss(model, leaves, episode, objective)
    grads = dict(zip(params, T.grad(loss, params.values())))
    if return_loss:
        return grads, loss.item()
    return grads


def average_gradients(gradients: Sequence[GradientSet]) -> GradientSet:
    """Elementwise mean, summed in list order so the result is order-deterministic."""
    if not gradients:
        raise ContractError("no gradients to average")
    names = list(gradients[0])
    out = {}
    for name in names:
        total = np.array(gradients[0][name], dtype=np.float64)
        for g in gradients[1:]:
            if name not in g:
                raise ShapeError(f"gradient set lacks {name}")
            if np.shape(g[name]) != total.shape:
                raise ShapeError(f"{name}: gradient shapes differ {list(np.shape(g[name]))} vs {list(total.shape)}")
            total = total + g[name]
        out[name] = total / len(gradients)
    for g in gradients[1:]:
        extra = set(g) - set(names)
        if extra:
            raise ShapeError(f"unexpected gradient entries {sorted(extra)}")
    return out


def meta_update(shared: AdapterSet, gradients: Sequence[GradientSet], state: AdamWState,
                beta: float) -> AdapterSet:
    """One AdamW step on ``shared`` using the mean of the per-task gradients."""
    avg = average_gradients(gradients)
    params = shared.parameters()
    if set(avg) != set(params):
        raise ShapeError(f"gradients cover {sorted(avg)}, shared adapter has {sorted(params)}")
    adamw_step(params, avg, state, beta)
    return shared


def _norm(grads: GradientSet) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def worker_count() -> int:
    raw = os.environ.get("MLORA_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"MLORA_THREADS must be an integer, got {raw!r}") from None


def _map(fn, items):
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def examples_per_iteration(config: MetaConfig, mode: str) -> int:
    if mode == STA and not config.sta_include_support:
        return config.n * config.n_query
    return config.n * (config.n_support + config.n_query)


def _task_step(model: Model, shared: AdapterSet, episode: Episode, config: MetaConfig,
               mode: str, objective: Objective):
    """Returns (support losses, query gradient, query loss, examples used)."""
    if mode == FULL:
        local, s_losses = adapt_with_trace(model, shared, episode, config.alpha, config.k, objective)
        grads, q = query_gradient(model, local, episode, objective, return_loss=True)
        return s_losses, grads, q, episode.n_support + episode.n_query
    if mode == STA:
        with T.no_grad():
            s_losses = [_finite(support_loss(model, shared, episode, objective).item(), "support loss")]
        target = episode
        if config.sta_include_support:
            x, y = episode.pooled()
            target = Episode(episode.support_x, episode.support_y, x, y, episode.task_id)
        grads, q = query_gradient(model, shared, target, objective, return_loss=True)
        return s_losses, grads, q, target.n_query
    if mode == JOINT:
        x, y = episode.pooled()
        pooled = Episode(x[:0], y[:0], x, y, episode.task_id)
        grads, q = query_gradient(model, shared, pooled, objective, return_loss=True)
        return [], grads, q, pooled.n_query
    raise ContractError(f"unknown training mode {mode!r}")


def _train(model: Model, suite: TaskSuite, config: MetaConfig, mode: str,
           shared: AdapterSet | None, on_record: Callable[[TrainRecord], None] | None):
    config.validate(len(suite))
    objective = Objective.for_suite(suite)
    if shared is None:
        shared = init_adapters(model, config.targets, config.rank, config.scale, config.seed)
    else:
        shared = shared.clone(role="global")
    model.check_binding(shared)
    state = config.adamw_state(shared)
    records: list[TrainRecord] = []
    for it in range(config.iterations):
        start = time.perf_counter()
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, it, 17]))
        batch = sample_task_batch(suite, config.n, it, rng)
        episodes = [sample_episode(task, config.n_support, config.n_query, it) for task in batch]

        def step(ep: Episode):
            try:
                out = _task_step(model, shared, ep, config, mode, objective)
                _finite(out[2], "query loss")
                return out
            except DivergenceError as exc:
                raise DivergenceError(f"iteration {it}, task {ep.task_id}: {exc}") from exc

        try:
            results = _map(step, episodes)
        except DivergenceError as exc:
            exc.records = records
            raise
        grads = [r[1] for r in results]
        avg = average_gradients(grads)
        meta_update(shared, grads, state, config.beta)
        rec = TrainRecord(
            iteration=it,
            task_ids=[t.task_id for t in batch],
            support_losses=[r[0] for r in results],
            query_losses=[r[2] for r in results],
            grad_norm=_norm(avg),
            elapsed_ms=(time.perf_counter() - start) * 1000.0,
            examples=sum(r[3] for r in results),
        )
        records.append(rec)
        if on_record is not None:
            on_record(rec)
    return shared, records


def run_meta_training(model: Model, suite: TaskSuite, config: MetaConfig,
                      shared: AdapterSet | None = None,
                      on_record: Callable[[TrainRecord], None] | None = None):
    """Full two-stage training. Returns (shared adapter, records).

    ``config.variant == "sta"`` dispatches to the ablation.
    """
    mode = STA if config.variant == STA else FULL
    return _train(model, suite, config, mode, shared, on_record)


def run_sta_training(model: Model, suite: TaskSuite, config: MetaConfig,
                     shared: AdapterSet | None = None,
                     on_record: Callable[[TrainRecord], None] | None = None):
    """Ablation without Phase I: query gradients are taken at the shared adapter itself."""
    return _train(model, suite, config, STA, shared, on_record)


def run_joint_baseline(model: Model, suite: TaskSuite, config: MetaConfig,
                       shared: AdapterSet | None = None,
                       on_record: Callable[[TrainRecord], None] | None = None):
    """Plain multi-task LoRA: one AdamW step per iteration on the pooled loss of all drawn examples."""
    return _train(model, suite, config, JOINT, shared, on_record)


def examples_consumed(records: Sequence[TrainRecord]) -> int:
    return sum(r.examples for r in records)


@dataclass
class AdaptationEval:
    task_ids: list[int]
    post_adaptation: list[float]
    zero_shot: list[float] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.post_adaptation))


def evaluate_adaptation(model: Model, suite: TaskSuite, adapters: AdapterSet, config: MetaConfig,
                        held_out: int = 100, eval_seed: int = 0,
                        tasks: Sequence | None = None) -> AdaptationEval:
    """Adapt ``k`` steps on a fresh support set of each held-out task, report query loss.

    Zero-shot losses are computed on the merged model (no adapter at inference).
    """
    objective = Objective.for_suite(suite)
    tasks = suite.held_out(held_out) if tasks is None else tasks
    merged = merge_adapter(model, adapters)
    ids, post, zero = [], [], []
    for task in tasks:
        ep = sample_episode(task, config.n_support, config.n_query, EVAL_EPISODE_BASE + eval_seed)
        local = inner_adapt(model, adapters, ep, config.alpha, config.k, objective)
        with T.no_grad():
            post.append(query_loss(model, local, ep, objective).item())
            zero.append(query_loss(merged, None, ep, objective).item())
        ids.append(task.task_id)
    return AdaptationEval(ids, post, zero)
