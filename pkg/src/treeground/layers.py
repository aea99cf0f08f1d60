"""Parameter containers and the few layers the model is built from."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from treeground import numerics as nx
from treeground.numerics import Tensor


def param(rng: np.random.Generator, shape, std: float | None = None, fill: float | None = None) -> Tensor:
    if fill is not None:
        data = np.full(shape, fill, dtype=np.float64)
    else:
        if std is None:
            std = 1.0 / math.sqrt(shape[0])
        data = rng.normal(0.0, std, size=shape)
    return Tensor(data, requires_grad=True)


class Module:
    """Anything holding trainable tensors as attributes (directly, or in sub-modules / lists)."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            yield from _walk(value, prefix + key)

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = self.parameters()
        if strict and set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, value in state.items():
            if name in own:
                if own[name].shape != value.shape:
                    raise ValueError(f"{name}: expected shape {own[name].shape}, got {value.shape}")
                own[name].data = np.array(value, dtype=np.float64)


def _walk(value, name: str):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True, std: float | None = None):
        self.weight = param(rng, (d_in, d_out), std=std)
        self.bias = param(rng, (d_out,), fill=0.0) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = nx.matmul(x, self.weight)
        return nx.add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, width: int):
        self.gain = Tensor(np.ones(width), requires_grad=True)
        self.shift = Tensor(np.zeros(width), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return nx.add(nx.mul_elementwise(nx.layernorm_lastdim(x), self.gain), self.shift)


class MLP(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_hidden: int, d_out: int):
        self.fc1 = Linear(rng, d_in, d_hidden)
        self.fc2 = Linear(rng, d_hidden, d_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(nx.relu(self.fc1(x)))


class MultiHeadAttention(Module):
    """Scaled dot-product attention over (T, C) token matrices.

    ``bias`` is an optional constant (Tq, Tk) additive mask; large negative
    entries exclude a key.  The most recent attention weights are kept in
    ``last_weights`` with shape (heads, Tq, Tk).
    """

    def __init__(self, rng: np.random.Generator, width: int, heads: int):
        if width % heads:
            raise ValueError(f"width {width} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(rng, width, width)
        self.k = Linear(rng, width, width)
        self.v = Linear(rng, width, width)
        self.out = Linear(rng, width, width)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        t, c = x.shape
        return nx.permute(nx.reshape(x, (t, self.heads, c // self.heads)), (1, 0, 2))

    def __call__(self, query: Tensor, context: Tensor, bias: np.ndarray | None = None) -> Tensor:
        tq, c = query.shape
        d = c // self.heads
        q = self._split(nx.scale(self.q(query), 1.0 / math.sqrt(d)))
        k = self._split(self.k(context))
        v = self._split(self.v(context))
        scores = nx.matmul(q, nx.permute(k, (0, 2, 1)))
        if bias is not None:
            scores = nx.add(scores, Tensor(bias))
        weights = nx.softmax_lastdim(scores)
        self.last_weights = weights.data
        mixed = nx.matmul(weights, v)
        return self.out(nx.reshape(nx.permute(mixed, (1, 0, 2)), (tq, c)))


class EncoderLayer(Module):
    """Pre-norm self-attention block."""

    def __init__(self, rng: np.random.Generator, width: int, heads: int, ffn: int):
        self.norm1 = LayerNorm(width)
        self.attn = MultiHeadAttention(rng, width, heads)
        self.norm2 = LayerNorm(width)
        self.ffn = MLP(rng, width, ffn, width)

    def __call__(self, x: Tensor, bias: np.ndarray | None = None) -> Tensor:
        h = self.norm1(x)
        x = nx.add(x, self.attn(h, h, bias))
        return nx.add(x, self.ffn(self.norm2(x)))
