"""Update rules: plain SGD for the inner loop, AdamW for the outer loop."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor


def _check(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> None:
    if set(params) != set(grads):
        missing = sorted(set(params) ^ set(grads))
        raise ShapeError(f"parameter and gradient names differ: {missing}")
    for name, p in params.items():
        g = np.shape(grads[name])
        if tuple(g) != p.shape:
            raise ShapeError(f"{name}: gradient shape {list(g)} does not match parameter {list(p.shape)}")
        if not p.requires_grad:
            raise ContractError(f"{name} is frozen and cannot be updated")


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
             lr: float) -> Mapping[str, Tensor]:
    """p <- p - lr * g for every named parameter."""
    _check(params, grads)
    for name, p in params.items():
        p.data = p.data - lr * np.asarray(grads[name], dtype=np.float64)
    return params


@dataclass
class AdamWState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor], **hyper) -> AdamWState:
        state = cls(**hyper)
        for name, p in params.items():
            state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        return state


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
               state: AdamWState, lr: float) -> tuple[Mapping[str, Tensor], AdamWState]:
    """One AdamW update with bias correction and decoupled weight decay."""
    _check(params, grads)
    if set(state.m) != set(params):
        raise ShapeError(f"optimizer state tracks {sorted(state.m)}, got {sorted(params)}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if state.m[name].shape != p.shape:
            raise ShapeError(f"{name}: optimizer moment shape {list(state.m[name].shape)} "
                             f"does not match parameter {list(p.shape)}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * p.data
        p.data = p.data - lr * update
    return params, state
