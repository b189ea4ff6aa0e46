"""Central finite differences and a registry of checks for every primitive."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .nn import cross_entropy_loss, mse_loss
from .tensor import Tensor


def finite_diff_grad(fn: Callable[[Tensor], Tensor | float], at: Tensor, h: float = 1e-6) -> np.ndarray:
    """(fn(x + h e_i) - fn(x - h e_i)) / 2h for every coordinate i."""
    if not h > 0:
        raise ValueError(f"step size must be positive, got {h}")
    base = np.array(at.data, dtype=np.float64)
    flat = base.reshape(-1)
    out = np.zeros(flat.shape)

    def value(arr: np.ndarray) -> float:
        with T.no_grad():
            r = fn(Tensor(arr.reshape(base.shape)))
        return r.item() if isinstance(r, Tensor) else float(r)

    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += h
        minus[i] -= h
        out[i] = (value(plus) - value(minus)) / (2.0 * h)
    return out.reshape(base.shape)


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """|a - b| / max(1, |a|, |b|) per coordinate."""
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


@dataclass(frozen=True)
class Check:
    """One differentiable function of a few random inputs, reduced to a scalar."""

    name: str
    shapes: tuple[tuple[int, ...], ...]
    fn: Callable[..., Tensor]
    positive: bool = False  # inputs drawn from [0.5, 2] instead of [-2, 2]


def _weighted(out: Tensor, rng: np.random.Generator) -> Tensor:
    # random weights make every output coordinate matter to the scalar
    if out.ndim == 0:
        return out
    return T.sum(T.mul(out, Tensor(rng.uniform(-1, 1, size=out.shape))))


def _registry() -> list[Check]:
    labels = np.array([2, 0, 1, 2])
    return [
        Check("add", ((3, 4), (3, 4)), T.add),
        Check("add_scalar", ((3, 4),), lambda a: T.add(a, 0.7)),
        Check("sub", ((3, 4), (3, 4)), T.sub),
        Check("scale", ((3, 4),), lambda a: T.scale(a, -1.3)),
        Check("elementwise_mul", ((3, 4), (3, 4)), T.mul),
        Check("add_bias", ((2, 3, 4), (4,)), T.add_bias),
        Check("matmul", ((3, 4), (4, 2)), T.matmul),
        Check("matmul_batched", ((2, 3, 4), (2, 4, 3)), T.matmul),
        Check("matmul_shared_rhs", ((2, 3, 4), (4, 5)), T.matmul),
        Check("transpose", ((2, 3, 4),), T.transpose),
        Check("reshape", ((2, 6),), lambda a: T.reshape(a, (3, 4))),
        Check("slice_lastdim", ((2, 5),), lambda a: T.slice_lastdim(a, 1, 4)),
        Check("concat_lastdim", ((2, 3), (2, 2)), lambda a, b: T.concat_lastdim([a, b])),
        Check("sum", ((3, 4),), T.sum),
        Check("sum_axis", ((2, 3, 4),), lambda a: T.sum(a, axis=1)),
        Check("mean", ((2, 3, 4),), lambda a: T.mean(a, axis=1)),
        Check("relu", ((4, 5),), T.relu),
        Check("tanh", ((4, 5),), T.tanh),
        Check("exp", ((4, 5),), T.exp),
        Check("log", ((4, 5),), T.log, positive=True),
        Check("softmax_lastdim", ((3, 5),), T.softmax_lastdim),
        Check("log_softmax_lastdim", ((3, 5),), T.log_softmax_lastdim),
        Check("mse_loss", ((4, 3), (4, 3)), mse_loss),
        Check("cross_entropy_loss", ((4, 3),), lambda z: cross_entropy_loss(z, labels)),
    ]


REGISTRY: list[Check] = _registry()


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    points: int
    passed: bool


def run_check(check: Check, points: int = 20, tol: float = 1e-5, h: float = 1e-6,
              seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(points):
        lo, hi = (0.5, 2.0) if check.positive else (-2.0, 2.0)
        arrays = [rng.uniform(lo, hi, size=s) for s in check.shapes]
        weights_seed = int(rng.integers(2**31))

        def scalar(*ts: Tensor) -> Tensor:
            return _weighted(check.fn(*ts), np.random.default_rng(weights_seed))

        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        analytic = T.grad(scalar(*leaves), leaves)
        for i, arr in enumerate(arrays):
            def along(x: Tensor, i=i) -> Tensor:
                args = [Tensor(a) for a in arrays]
                args[i] = x
                return scalar(*args)

            numeric = finite_diff_grad(along, Tensor(arr), h)
            worst = max(worst, float(relative_error(analytic[i], numeric).max()))
    return CheckResult(check.name, worst, points, worst < tol)


def gradcheck(registry: Sequence[Check] | None = None, points: int = 20, tol: float = 1e-5,
              h: float = 1e-6, seed: int = 0) -> list[CheckResult]:
    checks = REGISTRY if registry is None else registry
    return [run_check(c, points, tol, h, seed + i) for i, c in enumerate(checks)]


def format_results(results: Sequence[CheckResult], elapsed: float | None = None) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL'}  max_rel_err={r.max_rel_error:.3e}  "
             f"points={r.points}" for r in results]
    failed = [r.name for r in results if not r.passed]
    summary = f"{len(results) - len(failed)}/{len(results)} checks passed"
    if elapsed is not None:
        summary += f" in {elapsed:.2f}s"
    if failed:
        summary += f"; failed: {', '.join(failed)}"
    return "\n".join(lines + [summary])


def timed_gradcheck(**kw) -> tuple[list[CheckResult], float]:
    start = time.perf_counter()
    results = gradcheck(**kw)
    return results, time.perf_counter() - start
