"""Synthetic task families and the episodic support/query sampler.

Everything is a pure function of (suite seed, task id, episode index): task
latents come from one seeded stream per task, and each episode draws from its
own stream, so any episode can be regenerated in isolation.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from typing import Any, Iterator, Sequence

import numpy as np

from .errors import CapacityError, ContractError

SINUSOID = "sinusoid"
LOWRANK = "shared-low-rank-linear"
SEQUENCE = "toy-sequence-classification"
KINDS = (SINUSOID, LOWRANK, SEQUENCE)

_LATENT, _EPISODE, _SUITE = 0, 1, 2
_MAX_REDRAWS = 10_000


def _stream(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


@dataclass(frozen=True)
class TaskHandle:
    task_id: int
    kind: str
    params: dict[str, Any]
    suite_seed: int

    def episode_rng(self, episode_index: int) -> np.random.Generator:
        if episode_index < 0:
            raise ContractError(f"episode index must be non-negative, got {episode_index}")
        return _stream(self.suite_seed, self.task_id, _EPISODE, episode_index)

    def targets(self, x: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        p = self.params
        if self.kind == SINUSOID:
            return p["amplitude"] * np.sin(x + p["phase"])
        if self.kind == LOWRANK:
            w = p["W0"] + p["B"] @ p["A_star"]
            y = x @ w.T
            if p["noise"] > 0:
                if rng is None:
                    raise ContractError("noisy targets need the episode stream")
                y = y + p["noise"] * rng.standard_normal(y.shape)
            return y
        if self.kind == SEQUENCE:
            return np.array([int(_has_pair(row, p["marker"])) for row in np.atleast_2d(x)])
        raise ContractError(f"unknown task kind {self.kind!r}")


@dataclass
class Episode:
    """One task's (support, query) draw; inputs/targets are stacked row-wise."""

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    task_id: int = -1
    episode_index: int = -1

    def __post_init__(self) -> None:
        if len(self.support_x) != len(self.support_y) or len(self.query_x) != len(self.query_y):
            raise ContractError("inputs and targets must have the same number of rows")

    @property
    def n_support(self) -> int:
        return len(self.support_x)

    @property
    def n_query(self) -> int:
        return len(self.query_x)

    @property
    def support(self) -> list[tuple[np.ndarray, Any]]:
        return list(zip(self.support_x, self.support_y))

    @property
    def query(self) -> list[tuple[np.ndarray, Any]]:
        return list(zip(self.query_x, self.query_y))

    def is_disjoint(self) -> bool:
        seen = {np.asarray(x).tobytes() for x in self.support_x}
        return not any(np.asarray(x).tobytes() in seen for x in self.query_x)

    def pooled(self) -> tuple[np.ndarray, np.ndarray]:
        """Support and query stacked together."""
        return (np.concatenate([self.support_x, self.query_x]),
                np.concatenate([self.support_y, self.query_y]))


@dataclass
class TaskSuite(Sequence[TaskHandle]):
    """A list of training tasks plus what is needed to mint held-out ones."""

    kind: str
    seed: int
    tasks: list[TaskHandle]
    settings: dict[str, Any] = field(default_factory=dict)

    def __getitem__(self, i):
        return self.tasks[i]

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self) -> Iterator[TaskHandle]:
        return iter(self.tasks)

    @property
    def loss(self) -> str:
        return "cross_entropy" if self.kind == SEQUENCE else "mse"

    @property
    def input_dim(self) -> int:
        if self.kind == SINUSOID:
            return 1
        if self.kind == LOWRANK:
            return self.settings["d"]
        return self.settings["vocab"]

    @property
    def output_dim(self) -> int:
        if self.kind == SINUSOID:
            return 1
        if self.kind == LOWRANK:
            return self.settings["d"]
        return 2

    def task(self, task_id: int) -> TaskHandle:
        if 0 <= task_id < len(self.tasks):
            return self.tasks[task_id]
        return _make_task(self.kind, self.seed, task_id, self.settings)

    def held_out(self, count: int) -> list[TaskHandle]:
        """Fresh tasks from the same family, with ids after the training tasks."""
        n = len(self.tasks)
        return [self.task(i) for i in range(n, n + count)]

    def encode(self, x: np.ndarray) -> np.ndarray:
        """Model-ready inputs: token ids become one-hot [batch, seq, vocab]."""
        if self.kind != SEQUENCE:
            return np.asarray(x, dtype=np.float64)
        tokens = np.atleast_2d(np.asarray(x, dtype=np.int64))
        return np.eye(self.settings["vocab"])[tokens]

    def describe(self) -> dict[str, Any]:
        return {"kind": self.kind, "seed": self.seed, "num_tasks": len(self.tasks),
                **{k: v for k, v in self.settings.items() if not isinstance(v, np.ndarray)}}


def _suite_arrays(seed: int, d: int, r_true: int) -> tuple[np.ndarray, np.ndarray]:
    rng = _stream(seed, _SUITE)
    w0 = rng.uniform(-1.0 / math.sqrt(d), 1.0 / math.sqrt(d), size=(d, d))
    a_star = rng.standard_normal((r_true, d)) / math.sqrt(d)
    return w0, a_star


def _make_task(kind: str, seed: int, task_id: int, settings: dict[str, Any]) -> TaskHandle:
    rng = _stream(seed, task_id, _LATENT)
    if kind == SINUSOID:
        params = {"amplitude": float(rng.uniform(0.1, 5.0)),
                  "phase": float(rng.uniform(0.0, math.pi))}
    elif kind == LOWRANK:
        params = {"W0": settings["W0"], "A_star": settings["A_star"],
                  "B": rng.standard_normal((settings["d"], settings["r_true"])),
                  "noise": settings["noise"]}
    elif kind == SEQUENCE:
        a, b = rng.choice(settings["vocab"], size=2, replace=False)
        params = {"marker": (int(a), int(b)), "vocab": settings["vocab"],
                  "seq_len": settings["seq_len"]}
    else:
        raise ContractError(f"unknown task kind {kind!r}")
    return TaskHandle(task_id, kind, params, seed)


def make_sinusoid_suite(N: int = 10, seed: int = 0) -> TaskSuite:
    """Tasks y = A sin(x + phase), A in [0.1, 5], phase in [0, pi], x in [-5, 5]."""
    if N < 1:
        raise ContractError(f"need at least one task, got N={N}")
    settings: dict[str, Any] = {}
    return TaskSuite(SINUSOID, seed, [_make_task(SINUSOID, seed, i, settings) for i in range(N)], settings)


def make_shared_lowrank_suite(N: int = 10, d: int = 8, r_true: int = 2, seed: int = 0,
                              noise: float = 0.0) -> TaskSuite:
    """Tasks y = (W0 + B_t A*) x with suite-wide W0, A* and per-task B_t."""
    if N < 1:
        raise ContractError(f"need at least one task, got N={N}")
    if not 1 <= r_true <= d:
        raise ContractError(f"r_true must lie in [1, d={d}], got {r_true}")
    if noise < 0:
        raise ContractError(f"noise must be non-negative, got {noise}")
    w0, a_star = _suite_arrays(seed, d, r_true)
    settings = {"d": d, "r_true": r_true, "noise": float(noise), "W0": w0, "A_star": a_star}
    return TaskSuite(LOWRANK, seed, [_make_task(LOWRANK, seed, i, settings) for i in range(N)], settings)


def make_sequence_suite(N: int = 8, vocab: int = 8, seq_len: int = 6, seed: int = 0) -> TaskSuite:
    """Each task labels a token sequence 1 iff it contains the task's marker bigram."""
    if N < 1:
        raise ContractError(f"need at least one task, got N={N}")
    if vocab < 4 or seq_len < 2:
        raise ContractError(f"need vocab >= 4 and seq_len >= 2, got vocab={vocab}, seq_len={seq_len}")
    settings = {"vocab": vocab, "seq_len": seq_len}
    return TaskSuite(SEQUENCE, seed, [_make_task(SEQUENCE, seed, i, settings) for i in range(N)], settings)


def _has_pair(tokens: np.ndarray, marker: tuple[int, int]) -> bool:
    a, b = marker
    return bool(np.any((tokens[:-1] == a) & (tokens[1:] == b)))


def _distinct_rows(draw, count: int, seen: set[bytes]) -> np.ndarray:
    rows = []
    for _ in range(_MAX_REDRAWS + count):
        if len(rows) == count:
            break
        row = draw()
        key = row.tobytes()
        if key not in seen:
            seen.add(key)
            rows.append(row)
    if len(rows) < count:
        raise CapacityError(f"could only draw {len(rows)} of {count} distinct inputs")
    return np.stack(rows)


def _split_counts(size: int, rng: np.random.Generator) -> int:
    """Number of positives in a split of ``size``: half, odd remainder by coin flip."""
    return size // 2 + (int(rng.integers(2)) if size % 2 else 0)


def _sequence_episode(task: TaskHandle, n_s: int, n_q: int, rng: np.random.Generator):
    vocab, seq_len, marker = task.params["vocab"], task.params["seq_len"], task.params["marker"]
    if vocab ** seq_len < n_s + n_q:
        raise CapacityError(f"only {vocab ** seq_len} distinct sequences exist, need {n_s + n_q}")

    def positive():
        toks = rng.integers(vocab, size=seq_len)
        at = int(rng.integers(seq_len - 1))
        toks[at], toks[at + 1] = marker
        return toks

    def negative():
        for _ in range(_MAX_REDRAWS):
            toks = rng.integers(vocab, size=seq_len)
            if not _has_pair(toks, marker):
                return toks
        raise CapacityError("cannot draw a sequence without the marker pair")

    seen: set[bytes] = set()
    splits = []
    for size in (n_s, n_q):
        n_pos = _split_counts(size, rng)
        parts = []
        if n_pos:
            parts.append(_distinct_rows(positive, n_pos, seen))
        if size - n_pos:
            parts.append(_distinct_rows(negative, size - n_pos, seen))
        x = np.concatenate(parts)
        y = np.array([1] * n_pos + [0] * (size - n_pos))
        order = rng.permutation(size)
        splits.append((x[order], y[order]))
    return splits


def sample_episode(task: TaskHandle, n_s: int, n_q: int, episode_index: int) -> Episode:
    """Draw n_s + n_q distinct examples; the first n_s form the support set."""
    if n_s < 1 or n_q < 1:
        raise ContractError(f"support and query sizes must be >= 1, got {n_s}, {n_q}")
    rng = task.episode_rng(episode_index)
    if task.kind == SEQUENCE:
        (sx, sy), (qx, qy) = _sequence_episode(task, n_s, n_q, rng)
        return Episode(sx, sy, qx, qy, task.task_id, episode_index)
    if task.kind == SINUSOID:
        x = _distinct_rows(lambda: rng.uniform(-5.0, 5.0, size=1), n_s + n_q, set())
    else:
        d = task.params["W0"].shape[1]
        x = _distinct_rows(lambda: rng.uniform(-1.0, 1.0, size=d), n_s + n_q, set())
    y = task.targets(x, rng)
    return Episode(x[:n_s], y[:n_s], x[n_s:], y[n_s:], task.task_id, episode_index)


def sample_task_batch(suite: Sequence[TaskHandle], n: int, iteration_index: int = 0,
                      rng: np.random.Generator | None = None) -> list[TaskHandle]:
    """n distinct tasks, uniformly without replacement."""
    if not 1 <= n <= len(suite):
        raise ContractError(f"cannot select n={n} tasks from a suite of {len(suite)}")
    if rng is None:
        rng = _stream(getattr(suite, "seed", 0), iteration_index, _SUITE + 1)
    picks = rng.choice(len(suite), size=n, replace=False)
    return [suite[int(i)] for i in picks]


# ---------------------------------------------------------------------------
# JSON-lines export / import


def _jsonable(v) -> Any:
    return np.asarray(v).tolist()


def export_episodes_jsonl(path: str | os.PathLike, tasks: Sequence[TaskHandle], n_s: int,
                          n_q: int, episode_indices: Sequence[int]) -> int:
    """Write one example per line; returns the number of lines written."""
    lines = 0
    with open(path, "w") as f:
        for task in tasks:
            for idx in episode_indices:
                ep = sample_episode(task, n_s, n_q, idx)
                for split, xs, ys in (("support", ep.support_x, ep.support_y),
                                      ("query", ep.query_x, ep.query_y)):
                    for x, y in zip(xs, ys):
                        f.write(json.dumps({"task_id": task.task_id, "episode_index": idx,
                                            "split": split, "input": _jsonable(x),
                                            "target": _jsonable(y)}) + "\n")
                        lines += 1
    return lines


def read_episodes_jsonl(path: str | os.PathLike) -> dict[tuple[int, int], Episode]:
    """Rebuild episodes keyed by (task_id, episode_index)."""
    groups: dict[tuple[int, int], dict[str, tuple[list, list]]] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            split = rec["split"]
            if split not in ("support", "query"):
                raise ContractError(f"{path}:{lineno}: bad split tag {split!r}")
            key = (int(rec["task_id"]), int(rec["episode_index"]))
            xs, ys = groups.setdefault(key, {}).setdefault(split, ([], []))
            xs.append(rec["input"])
            ys.append(rec["target"])
    out = {}
    for (tid, idx), parts in groups.items():
        if set(parts) != {"support", "query"}:
            raise ContractError(f"{path}: episode {(tid, idx)} lacks a support or query split")
        sx, sy = parts["support"]
        qx, qy = parts["query"]
        out[(tid, idx)] = Episode(np.array(sx), np.array(sy), np.array(qx), np.array(qy), tid, idx)
    return out


def with_params(task: TaskHandle, **params) -> TaskHandle:
    """Copy of ``task`` with some latent parameters overridden."""
    return dataclasses.replace(task, params={**task.params, **params})
