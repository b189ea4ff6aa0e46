"""Low-rank adapters: delta = scale * B @ A attached to named linear layers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import BindingError, ContractError, ShapeError
from .nn import Model
from .serialize import read_file, write_file
from .tensor import Tensor

HEADER = "lora.header"


@dataclass
class LoraAdapter:
    A: Tensor  # [r, d_in]
    B: Tensor  # [d_out, r]
    scale: float = 1.0
    target: str = ""

    def __post_init__(self) -> None:
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[0] != self.B.shape[1]:
            raise ShapeError(f"{self.target}: A {list(self.A.shape)} and B {list(self.B.shape)} "
                             "do not form a rank-r pair")
        if self.rank > min(self.d_in, self.d_out):
            raise ContractError(f"{self.target}: rank {self.rank} exceeds min(d_in={self.d_in}, d_out={self.d_out})")
        if not self.scale >= 0:
            raise ContractError(f"{self.target}: scale must be non-negative, got {self.scale}")
        self.A.requires_grad = True
        self.B.requires_grad = True

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    def copy(self) -> LoraAdapter:
        return LoraAdapter(Tensor(self.A.data), Tensor(self.B.data), self.scale, self.target)


def delta(adapter: LoraAdapter) -> Tensor:
    return T.scale(T.matmul(adapter.B, adapter.A), adapter.scale)


def delta_array(adapter: LoraAdapter) -> np.ndarray:
    return adapter.scale * (adapter.B.data @ adapter.A.data)


class AdapterSet(Mapping[str, LoraAdapter]):
    """Adapters keyed by the layer they attach to.

    ``role`` is ``"global"`` for the shared adapter and ``"local"`` for
    per-task copies made during adaptation.
    """

    def __init__(self, adapters: Mapping[str, LoraAdapter], role: str = "global") -> None:
        if role not in ("global", "local"):
            raise ContractError(f"role must be 'global' or 'local', got {role!r}")
        self._adapters = dict(adapters)
        self.role = role

    def __getitem__(self, name: str) -> LoraAdapter:
        return self._adapters[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._adapters)

    def __len__(self) -> int:
        return len(self._adapters)

    def __repr__(self) -> str:
        return f"AdapterSet({list(self._adapters)}, role={self.role!r})"

    def parameters(self) -> dict[str, Tensor]:
        """Trainable tensors named ``<target>.lora_A`` / ``<target>.lora_B``."""
        out: dict[str, Tensor] = {}
        for name, ad in self._adapters.items():
            out[f"{name}.lora_A"] = ad.A
            out[f"{name}.lora_B"] = ad.B
        return out

    def trainable_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def clone(self, role: str = "local") -> AdapterSet:
        return AdapterSet({k: a.copy() for k, a in self._adapters.items()}, role=role)

    def state(self) -> dict[str, np.ndarray]:
        """Copies of every parameter array, for byte comparisons."""
        return {k: p.data.copy() for k, p in self.parameters().items()}

    def values_equal(self, other: AdapterSet) -> bool:
        if list(self) != list(other):
            return False
        if any(self[k].scale != other[k].scale for k in self):
            return False
        a, b = self.state(), other.state()
        return all(a[k].tobytes() == b[k].tobytes() for k in a)


def init_adapters(model: Model, targets: Sequence[str] | None = None, r: int = 4,
                  s: float = 1.0, rng_seed: int = 0) -> AdapterSet:
    """A ~ U(-1/sqrt(d_in), 1/sqrt(d_in)), B = 0, so every delta starts at zero."""
    layers = model.linear_layers()
    targets = list(model.default_targets if targets is None else targets)
    if not targets:
        raise ContractError("no adapter targets given and the model declares no defaults")
    if len(set(targets)) != len(targets):
        raise ContractError(f"duplicate adapter targets: {targets}")
    if r < 1:
        raise ContractError(f"rank must be positive, got {r}")
    rng = np.random.default_rng(rng_seed)
    adapters = {}
    for name in targets:
        if name not in layers:
            raise BindingError(f"unknown adapter target {name!r}; model has {sorted(layers)}")
        lin = layers[name]
        if r > min(lin.d_in, lin.d_out):
            raise ContractError(f"rank {r} too large for {name} ({lin.d_out}x{lin.d_in})")
        bound = 1.0 / math.sqrt(lin.d_in)
        A = Tensor(rng.uniform(-bound, bound, size=(r, lin.d_in)))
        B = Tensor(np.zeros((lin.d_out, r)))
        adapters[name] = LoraAdapter(A, B, float(s), name)
    return AdapterSet(adapters, role="global")


def clone_adapters(shared: AdapterSet) -> AdapterSet:
    return shared.clone(role="local")


def merge_adapter(model: Model, shared: AdapterSet) -> Model:
    """New model with W0 <- W0 + scale * B @ A for each target; no adapters remain."""
    model.check_binding(shared)
    merged = model.copy()
    layers = merged.linear_layers()
    for name, ad in shared.items():
        lin = layers[name]
        if (ad.d_out, ad.d_in) != lin.weight.shape:
            raise BindingError(f"adapter for {name} has shape {ad.d_out}x{ad.d_in}, "
                               f"layer weight is {lin.weight.shape[0]}x{lin.weight.shape[1]}")
        lin.weight = Tensor(lin.weight.data + delta_array(ad))
        lin.weight.requires_grad = not lin.frozen
    return merged


def check_compatible(model: Model, adapters: AdapterSet) -> None:
    """Raise BindingError unless every adapter fits its target layer."""
    model.check_binding(adapters)
    layers = model.linear_layers()
    for name, ad in adapters.items():
        if (ad.d_out, ad.d_in) != layers[name].weight.shape:
            raise BindingError(f"adapter for {name} is {ad.d_out}x{ad.d_in}, layer is "
                               f"{layers[name].weight.shape[0]}x{layers[name].weight.shape[1]}")


def adapter_records(adapters: AdapterSet) -> dict[str, np.ndarray]:
    ranks = {a.rank for a in adapters.values()}
    scales = {a.scale for a in adapters.values()}
    if len(ranks) > 1 or len(scales) > 1:
        raise ContractError("adapter files store one rank and scale; the set mixes several")
    records = {HEADER: np.array([float(ranks.pop()), float(scales.pop())])}
    records.update({k: p.data for k, p in adapters.parameters().items()})
    return records


def save_adapters(path, adapters: AdapterSet) -> None:
    write_file(path, adapter_records(adapters))


def load_adapters(path) -> AdapterSet:
    records = read_file(path)
    if HEADER not in records:
        raise ContractError(f"{path}: missing {HEADER} record")
    r, s = records.pop(HEADER)
    pairs: dict[str, dict[str, np.ndarray]] = {}
    for name, arr in records.items():
        target, _, part = name.rpartition(".")
        if part not in ("lora_A", "lora_B") or not target:
            raise ContractError(f"{path}: unexpected record {name!r}")
        pairs.setdefault(target, {})[part] = arr
    adapters = {}
    for target, parts in pairs.items():
        if set(parts) != {"lora_A", "lora_B"}:
            raise ContractError(f"{path}: incomplete adapter for {target}")
        ad = LoraAdapter(Tensor(parts["lora_A"]), Tensor(parts["lora_B"]), float(s), target)
        if ad.rank != int(r):
            raise ContractError(f"{path}: {target} has rank {ad.rank}, header says {int(r)}")
        adapters[target] = ad
    return AdapterSet(adapters, role="global")
