"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every primitive returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to input gradients. :func:`backward` sorts
the reachable graph into a tape (topological order) and replays it in reverse.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import ContractError, NonFiniteError, ShapeError

MAX_RANK = 3

_state = threading.local()


def _flag(name: str, default: bool) -> bool:
    return getattr(_state, name, default)


def is_grad_enabled() -> bool:
    return _flag("grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Run forward passes without recording a graph (per thread)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


_debug = False


def set_debug(enabled: bool) -> None:
    """Toggle the NaN/Inf check that runs after every primitive."""
    global _debug
    _debug = bool(enabled)


def is_debug() -> bool:
    return _debug


@contextmanager
def debug_mode(enabled: bool = True) -> Iterator[None]:
    prev = _debug
    set_debug(enabled)
    try:
        yield
    finally:
        set_debug(prev)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A float64 array that can take part in a computation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False) -> None:
        arr = np.array(data, dtype=np.float64)
        _check_shape(arr.shape)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple[Tensor, ...],
                 backward: BackwardFn, op: str) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = parents if track else ()
        out._backward = backward if track else None
        if _debug and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"{op} produced a non-finite value")
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self, requires_grad: bool = False) -> Tensor:
        """Fresh leaf holding a copy of the values."""
        return Tensor(self.data, requires_grad=requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(self, other)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return add(scale(self, -1.0), other)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(self, other)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def _not_scalar(t: Tensor) -> float:
    raise ContractError(f"expected a single-element tensor, got shape {list(t.shape)}")


def _check_shape(shape: tuple[int, ...]) -> None:
    if len(shape) > MAX_RANK:
        raise ShapeError(f"rank {len(shape)} exceeds the maximum of {MAX_RANK}: {list(shape)}")
    if any(d <= 0 for d in shape):
        raise ShapeError(f"dimensions must be positive, got {list(shape)}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer)) and not isinstance(x, bool)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {list(a.shape)} vs {list(b.shape)}")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor | float) -> Tensor:
    if _is_scalar(b):
        c = float(b)
        return Tensor._from_op(a.data + c, (a,), lambda g: (g,), "add")
    _same_shape(a, b, "add")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor | float) -> Tensor:
    if _is_scalar(b):
        c = float(b)
        return Tensor._from_op(a.data - c, (a,), lambda g: (g,), "sub")
    _same_shape(a, b, "sub")
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def mul(a: Tensor, b: Tensor | float) -> Tensor:
    """Elementwise product; a scalar second operand is a constant factor."""
    if _is_scalar(b):
        return scale(a, b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


elementwise_mul = mul


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x[..., j] + bias[j]; the one broadcast the layers need."""
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"add_bias: cannot add bias {list(bias.shape)} to {list(x.shape)}")
    lead = tuple(range(x.ndim - 1))
    return Tensor._from_op(x.data + bias.data, (x, bias),
                           lambda g: (g, g.sum(axis=lead)), "add_bias")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of [m,k]@[k,p], [b,m,k]@[b,k,p] or [b,m,k]@[k,p]."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or b.ndim > a.ndim \
            or (a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul: incompatible shapes {list(a.shape)} and {list(b.shape)}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def backward(g: np.ndarray):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        if b.requires_grad:
            if ad.ndim == 3 and bd.ndim == 2:
                gb = np.einsum("bmk,bmp->kp", ad, g)
            else:
                gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return Tensor._from_op(out, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"transpose needs rank >= 2, got {list(a.shape)}")
    return Tensor._from_op(np.swapaxes(a.data, -1, -2), (a,),
                           lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(d) for d in shape)
    _check_shape(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {list(a.shape)} as {list(shape)}")
    src = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def slice_lastdim(a: Tensor, start: int, stop: int) -> Tensor:
    width = a.shape[-1]
    if not 0 <= start < stop <= width:
        raise ShapeError(f"slice [{start}:{stop}] out of range for last dim {width}")

    def backward(g: np.ndarray):
        full = np.zeros(a.shape)
        full[..., start:stop] = g
        return (full,)

    return Tensor._from_op(a.data[..., start:stop].copy(), (a,), backward, "slice_lastdim")


def concat_lastdim(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_lastdim needs at least one tensor")
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != lead:
            raise ShapeError(f"concat_lastdim: leading shapes differ {list(lead)} vs {list(p.shape[:-1])}")
    bounds = np.cumsum([0] + [p.shape[-1] for p in parts])

    def backward(g: np.ndarray):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return Tensor._from_op(np.concatenate([p.data for p in parts], axis=-1),
                           tuple(parts), backward, "concat_lastdim")


# ---------------------------------------------------------------------------
# reductions


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    if axis is None:
        shape = a.shape
        return Tensor._from_op(np.asarray(a.data.sum()), (a,),
                               lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    axis = axis % a.ndim

    def backward(g: np.ndarray):
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return Tensor._from_op(a.data.sum(axis=axis), (a,), backward, "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / count)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._from_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return Tensor._from_op(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return Tensor._from_op(e, (a,), lambda g: (g * e,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ContractError("log of a non-positive value")
    d = a.data
    return Tensor._from_op(np.log(d), (a,), lambda g: (g / d,), "log")


def softmax_lastdim(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(s, (a,), backward, "softmax_lastdim")


def log_softmax_lastdim(a: Tensor) -> Tensor:
    """Log-softmax via the shifted log-sum-exp, stable for large logits."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def backward(g: np.ndarray):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return Tensor._from_op(out, (a,), backward, "log_softmax_lastdim")


# ---------------------------------------------------------------------------
# reverse pass


def build_tape(loss: Tensor) -> list[Tensor]:
    """Graph nodes reachable from ``loss`` in topological order (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _check_loss(loss: Tensor) -> None:
    if loss.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {list(loss.shape)}")


def _propagate(loss: Tensor) -> tuple[dict[int, np.ndarray], list[Tensor]]:
    tape = build_tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(tape):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return grads, tape


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor that requires grad."""
    _check_loss(loss)
    if not loss.requires_grad:
        return
    grads, tape = _propagate(loss)
    for node in tape:
        g = grads.get(id(node))
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64).reshape(node.shape)
        node.grad = g.copy() if node.grad is None else node.grad + g


def grad(loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``wrt`` without touching ``.grad``.

    Tensors the loss does not depend on get zeros.
    """
    _check_loss(loss)
    wrt = list(wrt)
    if not loss.requires_grad:
        return [np.zeros(t.shape) for t in wrt]
    grads, _ = _propagate(loss)
    return [np.asarray(grads[id(t)], dtype=np.float64).reshape(t.shape).copy()
            if id(t) in grads else np.zeros(t.shape) for t in wrt]
