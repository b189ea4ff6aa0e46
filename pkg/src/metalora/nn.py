"""Small frozen-base models: linear layers, an MLP, one attention block, losses."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np

from . import tensor as T
from .errors import BindingError, ContractError, ShapeError
from .tensor import Tensor


@dataclass
class LinearLayer:
    """y = x W^T + b, with W stored as [d_out, d_in].

    A frozen layer's weight and bias never require grad, so no optimizer
    step can touch them.
    """

    name: str
    weight: Tensor
    bias: Tensor | None = None
    frozen: bool = True

    def __post_init__(self) -> None:
        if self.weight.ndim != 2:
            raise ShapeError(f"{self.name}: weight must be 2-D, got {list(self.weight.shape)}")
        if self.bias is not None and self.bias.shape != (self.d_out,):
            raise ShapeError(f"{self.name}: bias shape {list(self.bias.shape)} does not match d_out={self.d_out}")
        self.weight.requires_grad = not self.frozen
        if self.bias is not None:
            # biases belong to the base model and are never adapted
            self.bias.requires_grad = False

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor, adapter=None) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"{self.name}: expected input last dim {self.d_in}, got {list(x.shape)}")
        y = T.matmul(x, T.transpose(self.weight))
        if adapter is not None:
            # (x A^T) B^T keeps the rank-r bottleneck; the merged weight is never formed
            low = T.matmul(T.matmul(x, T.transpose(adapter.A)), T.transpose(adapter.B))
            y = T.add(y, T.scale(low, adapter.scale))
        if self.bias is not None:
            y = T.add_bias(y, self.bias)
        return y


@dataclass
class Activation:
    kind: str = "tanh"

    def __post_init__(self) -> None:
        if self.kind not in ("tanh", "relu"):
            raise ContractError(f"unknown activation {self.kind!r}")

    def __call__(self, x: Tensor) -> Tensor:
        return T.tanh(x) if self.kind == "tanh" else T.relu(x)


@dataclass
class MeanPool:
    """Average over the sequence axis: [batch, seq, d] -> [batch, d]."""

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3:
            raise ShapeError(f"MeanPool expects [batch, seq, d], got {list(x.shape)}")
        return T.mean(x, axis=1)


@dataclass
class AttentionBlock:
    """Multi-head self-attention with named Q/K/V/O projections."""

    name: str
    q: LinearLayer
    k: LinearLayer
    v: LinearLayer
    o: LinearLayer
    head_count: int = 2

    def __post_init__(self) -> None:
        d = self.q.d_in
        for proj in (self.q, self.k, self.v, self.o):
            if proj.d_in != d or proj.d_out != d:
                raise ShapeError(f"{proj.name}: attention projections must be {d}x{d}")
        if self.head_count < 1 or d % self.head_count:
            raise ContractError(f"head_count {self.head_count} must divide model dimension {d}")

    @property
    def d_model(self) -> int:
        return self.q.d_in

    def projections(self) -> list[LinearLayer]:
        return [self.q, self.k, self.v, self.o]

    def __call__(self, x: Tensor, adapters: Mapping = None) -> Tensor:
        adapters = adapters or {}
        squeeze = x.ndim == 2
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        q = self.q(x, adapters.get(self.q.name))
        k = self.k(x, adapters.get(self.k.name))
        v = self.v(x, adapters.get(self.v.name))
        dh = self.d_model // self.head_count
        inv = 1.0 / math.sqrt(dh)
        heads = []
        for h in range(self.head_count):
            lo, hi = h * dh, (h + 1) * dh
            qh, kh, vh = (T.slice_lastdim(t, lo, hi) for t in (q, k, v))
            weights = T.softmax_lastdim(T.scale(T.matmul(qh, T.transpose(kh)), inv))
            heads.append(T.matmul(weights, vh))
        mixed = heads[0] if len(heads) == 1 else T.concat_lastdim(heads)
        out = self.o(mixed, adapters.get(self.o.name))
        if squeeze:
            out = T.reshape(out, out.shape[1:])
        return out


Layer = Union[LinearLayer, Activation, MeanPool, AttentionBlock]


@dataclass
class Model:
    """A frozen base network: hidden layers followed by a task head."""

    layers: list[Layer]
    head: LinearLayer
    input_dim: int
    default_targets: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        names = [lin.name for lin in self._iter_linear()]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise ContractError(f"duplicate layer names: {sorted(dupes)}")

    def _iter_linear(self):
        for layer in self.layers:
            if isinstance(layer, LinearLayer):
                yield layer
            elif isinstance(layer, AttentionBlock):
                yield from layer.projections()
        yield self.head

    def linear_layers(self) -> dict[str, LinearLayer]:
        return {lin.name: lin for lin in self._iter_linear()}

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for lin in self._iter_linear():
            out[f"{lin.name}.weight"] = lin.weight
            if lin.bias is not None:
                out[f"{lin.name}.bias"] = lin.bias
        return out

    def check_binding(self, adapters: Mapping) -> None:
        known = self.linear_layers()
        for name in adapters.keys():
            if name not in known:
                raise BindingError(f"adapter targets unknown layer {name!r}; model has {sorted(known)}")

    def forward(self, x: Tensor, adapters: Mapping | None = None) -> Tensor:
        if adapters:
            self.check_binding(adapters)
        adapters = adapters or {}
        if x.shape[-1] != self.input_dim:
            raise ShapeError(f"model expects input last dim {self.input_dim}, got {list(x.shape)}")
        h = x
        for layer in self.layers:
            if isinstance(layer, LinearLayer):
                h = layer(h, adapters.get(layer.name))
            elif isinstance(layer, AttentionBlock):
                h = layer(h, adapters)
            else:
                h = layer(h)
        return self.head(h, adapters.get(self.head.name))

    __call__ = forward

    def copy(self) -> Model:
        return copy.deepcopy(self)


def forward(model: Model, x: Tensor, adapters: Mapping | None = None) -> Tensor:
    return model.forward(x, adapters)


# ---------------------------------------------------------------------------
# builders


def _uniform_linear(rng: np.random.Generator, name: str, d_in: int, d_out: int,
                    bias: bool) -> LinearLayer:
    bound = 1.0 / math.sqrt(d_in)
    w = Tensor(rng.uniform(-bound, bound, size=(d_out, d_in)))
    b = Tensor(rng.uniform(-bound, bound, size=(d_out,))) if bias else None
    return LinearLayer(name, w, b)


def build_mlp(sizes: Sequence[int], activation: str = "tanh", seed: int = 0,
              bias: bool = True, targets: Sequence[str] | None = None) -> Model:
    """MLP with layers named ``mlp.0 .. mlp.{L-2}`` and a final ``head``."""
    if len(sizes) < 2:
        raise ContractError("an MLP needs at least input and output sizes")
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    for i, (a, b) in enumerate(zip(sizes[:-2], sizes[1:-1])):
        layers.append(_uniform_linear(rng, f"mlp.{i}", a, b, bias))
        layers.append(Activation(activation))
    head = _uniform_linear(rng, "head", sizes[-2], sizes[-1], bias)
    if targets is None:
        targets = tuple(f"mlp.{i}" for i in range(1, len(sizes) - 2))
    return Model(layers, head, input_dim=sizes[0], default_targets=tuple(targets))


def build_linear(weight, bias=None, name: str = "linear") -> Model:
    """A single frozen linear map, adaptable under ``name``."""
    w = Tensor(weight)
    head = LinearLayer(name, w, Tensor(bias) if bias is not None else None)
    return Model([], head, input_dim=w.shape[1], default_targets=(name,))


def build_attention_classifier(vocab: int, d_model: int = 32, head_count: int = 2,
                               n_classes: int = 2, seed: int = 0) -> Model:
    """embed -> attention (attn.q/k/v/o) -> mean pool -> head.

    Inputs are one-hot token arrays of shape [batch, seq, vocab].
    """
    rng = np.random.default_rng(seed)
    embed = _uniform_linear(rng, "embed", vocab, d_model, bias=False)
    # unit-scale embeddings so attention scores are not vanishingly small
    embed.weight.data *= math.sqrt(vocab)
    projs = [_uniform_linear(rng, f"attn.{p}", d_model, d_model, bias=False) for p in "qkvo"]
    attn = AttentionBlock("attn", *projs, head_count=head_count)
    head = _uniform_linear(rng, "head", d_model, n_classes, bias=True)
    return Model([embed, attn, MeanPool()], head, input_dim=vocab,
                 default_targets=("attn.q", "attn.k", "attn.v", "attn.o"))


# ---------------------------------------------------------------------------
# losses


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean of squared differences over every element."""
    target = T.as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shape mismatch {list(pred.shape)} vs {list(target.shape)}")
    diff = T.sub(pred, target)
    return T.mean(T.mul(diff, diff))


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-probability of the true class (stable log-softmax)."""
    if logits.ndim == 1:
        logits = T.reshape(logits, (1, logits.shape[0]))
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_loss expects [batch, classes], got {list(logits.shape)}")
    labels = np.atleast_1d(np.asarray(labels))
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy_loss: {labels.shape[0]} labels for batch of {n}")
    if not np.issubdtype(labels.dtype, np.integer):
        if np.any(labels != np.round(labels)):
            raise ContractError("labels must be integer class indices")
        labels = labels.astype(np.int64)
    if np.any(labels < 0) or np.any(labels >= c):
        raise ContractError(f"labels must lie in [0, {c}), got {labels.tolist()}")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    picked = T.sum(T.mul(T.log_softmax_lastdim(logits), Tensor(onehot)), axis=-1)
    return T.scale(T.mean(picked), -1.0)


LOSSES = {"mse": mse_loss, "cross_entropy": cross_entropy_loss}


def save_weights(model: Model, path) -> None:
    """Write every base parameter as ``<layer>.weight`` / ``<layer>.bias`` (MLLW1)."""
    from .serialize import write_file

    write_file(path, {name: t.data for name, t in model.named_parameters().items()})


def load_weights(model: Model, path) -> Model:
    """Copy of ``model`` with its base parameters replaced from an MLLW1 file."""
    from .serialize import read_file

    records = read_file(path)
    out = model.copy()
    params = out.named_parameters()
    for name, arr in records.items():
        if name not in params:
            raise BindingError(f"weight file has unknown parameter {name!r}")
        if arr.shape != params[name].shape:
            raise ShapeError(f"{name}: file shape {list(arr.shape)} vs model {list(params[name].shape)}")
        params[name].data = arr.copy()
    missing = sorted(set(params) - set(records))
    if missing:
        raise BindingError(f"weight file lacks parameters {missing}")
    return out
