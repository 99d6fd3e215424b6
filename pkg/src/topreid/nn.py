"""Parameter containers and the transformer layers shared by every stream."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

INIT_STD = 0.02


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal samples redrawn until they fall inside two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Minimal container: parameters are Tensor attributes, children are
    Module attributes or lists/dicts of Modules. Traversal order follows
    attribute assignment order, so names are stable for a given config."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
            elif isinstance(value, dict):
                for k, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            children = []
            if isinstance(value, Module):
                children = [value]
            elif isinstance(value, (list, tuple)):
                children = [v for v in value if isinstance(v, Module)]
            elif isinstance(value, dict):
                children = [v for v in value.values() if isinstance(v, Module)]
            for child in children:
                yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        """Copy arrays into parameters, checking names and shapes first."""
        own = dict(self.named_parameters())
        for name, p in own.items():
            if name not in state:
                raise KeyError(f"missing parameter {name!r}")
            if tuple(state[name].shape) != p.shape:
                raise ValueError(f"parameter {name!r}: expected shape {p.shape}, got {tuple(state[name].shape)}")
        extra = sorted(set(state) - set(own))
        if extra:
            raise KeyError(f"unexpected parameter {extra[0]!r}")
        for name, p in own.items():
            p.data = np.array(state[name], dtype=p.dtype, copy=True)

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = parameter(trunc_normal(rng, (d_in, d_out)))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 1:
            y = T.matmul(x.reshape((1, x.shape[0])), self.weight).reshape((self.weight.shape[1],))
        else:
            y = T.matmul(x, self.weight)
        return y if self.bias is None else T.add(y, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.weight = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class FeedForward(Module):
    """Two-layer GELU MLP, ``dim -> ratio*dim -> dim``."""

    def __init__(self, rng: np.random.Generator, dim: int, ratio: float = 4.0, dropout: float = 0.0):
        hidden = int(round(dim * ratio))
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)
        self.dropout = dropout
        self._rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        h = T.gelu(self.fc1(x))
        h = T.dropout(h, self.dropout, self._rng, self.training)
        return self.fc2(h)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """``(..., N, D) -> (..., heads, N, D/heads)``."""
    *lead, n, dim = x.shape
    x = x.reshape(tuple(lead) + (n, heads, dim // heads))
    nl = len(lead)
    return T.transpose(x, tuple(range(nl)) + (nl + 1, nl, nl + 2))


def merge_heads(x: Tensor) -> Tensor:
    """Inverse of :func:`split_heads`."""
    *lead, heads, n, d = x.shape
    nl = len(lead)
    x = T.transpose(x, tuple(range(nl)) + (nl + 1, nl, nl + 2))
    return x.reshape(tuple(lead) + (n, heads * d))


class SelfAttention(Module):
    def __init__(self, rng: np.random.Generator, dim: int, heads: int, dropout: float = 0.0):
        if dim % heads:
            raise ValueError(f"embed dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = Linear(rng, dim, 3 * dim)
        self.proj = Linear(rng, dim, dim)
        self.dropout = dropout
        self._rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        dim = x.shape[-1]
        qkv = self.qkv(x)
        q = split_heads(qkv[..., :dim], self.heads)
        k = split_heads(qkv[..., dim:2 * dim], self.heads)
        v = split_heads(qkv[..., 2 * dim:], self.heads)
        attn = T.softmax(T.scale(T.matmul(q, T.swap_last(k)), self.scale), axis=-1)
        attn = T.dropout(attn, self.dropout, self._rng, self.training)
        return self.proj(merge_heads(T.matmul(attn, v)))


class Block(Module):
    """Pre-norm transformer block: ``x + attn(LN(x))`` then ``x + ffn(LN(x))``."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, ffn_ratio: float = 4.0, dropout: float = 0.0):
        self.norm1 = LayerNorm(dim)
        self.attn = SelfAttention(rng, dim, heads, dropout)
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(rng, dim, ffn_ratio, dropout)

    def __call__(self, x: Tensor) -> Tensor:
        x = T.add(x, self.attn(self.norm1(x)))
        return T.add(x, self.ffn(self.norm2(x)))

    def zero_residual_branches(self) -> None:
        """Zero the output layers of both branches, making the block the identity."""
        for lin in (self.attn.proj, self.ffn.fc2):
            lin.weight.data[...] = 0
            if lin.bias is not None:
                lin.bias.data[...] = 0
