"""Token Permutation Module: cyclic class-token / patch-bank cross-attention.

At stage ``k`` the class token that started in stream ``s`` attends the patch
bank of stream ``shift(s, k)`` with the cyclic order R -> N -> T -> R, so after
stage 1 each class token has seen the next spectrum, after stage 2 the one
after that, and stage 3 brings it back to its own patches. Patch banks are
read, never written.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import FeedForward, LayerNorm, Linear, Module
from .tensor import Tensor
from .vit import SPECTRA, split_tokens


def shift(stream: str, k: int) -> str:
    """Spectrum reached from ``stream`` after ``k`` cyclic steps."""
    return SPECTRA[(SPECTRA.index(stream) + k) % len(SPECTRA)]


class PermutationUnit(Module):
    """Multi-head cross-attention from one class token onto a patch bank,
    followed by an FFN with a residual around it."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, ffn_ratio: float = 4.0):
        if dim % heads:
            raise ValueError(f"embed dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.norm_q = LayerNorm(dim)
        self.norm_kv = LayerNorm(dim)
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.proj = Linear(rng, dim, dim)
        self.ffn = FeedForward(rng, dim, ffn_ratio)

    def attention(self, cls: Tensor, patches: Tensor) -> tuple[Tensor, Tensor]:
        """Return the MHCA output ``(..., D)`` and weights ``(..., heads, M)``."""
        dim = cls.shape[-1]
        if patches.shape[-1] != dim or patches.shape[:-2] != cls.shape[:-1]:
            raise T.ShapeError(f"class token {cls.shape} does not match patch bank {patches.shape}")
        h, d = self.heads, dim // self.heads
        lead = cls.shape[:-1]
        m = patches.shape[-2]
        nl = len(lead)
        kv_in = self.norm_kv(patches)
        q = self.q(self.norm_q(cls)).reshape(lead + (h, 1, d))
        k = self.k(kv_in).reshape(lead + (m, h, d))
        v = self.v(kv_in).reshape(lead + (m, h, d))
        heads_first = tuple(range(nl)) + (nl + 1, nl, nl + 2)
        k = T.transpose(k, heads_first)  # (..., h, M, d)
        v = T.transpose(v, heads_first)
        scores = T.scale(T.matmul(q, T.swap_last(k)), 1.0 / np.sqrt(d))  # (..., h, 1, M)
        weights = T.softmax(scores, axis=-1)
        out = T.matmul(weights, v).reshape(lead + (dim,))
        return self.proj(out), weights.reshape(lead + (h, m))

    def __call__(self, cls: Tensor, patches: Tensor) -> Tensor:
        fused, _ = self.attention(cls, patches)
        return T.add(self.ffn(fused), fused)


def permute_step(cls: Tensor, patches: Tensor, unit: PermutationUnit) -> Tensor:
    return unit(cls, patches)


@dataclass
class PermutationState:
    cls: dict[str, Tensor]
    patches: dict[str, Tensor]
    stage: int = 0
    history: list[dict[str, Tensor]] = field(default_factory=list)

    @classmethod
    def from_tokens(cls, tokens: dict[str, Tensor]) -> "PermutationState":
        shapes = {s: tokens[s].shape for s in SPECTRA}
        if len(set(shapes.values())) != 1:
            raise T.ShapeError(f"token matrices differ in shape: {shapes}")
        heads, banks = {}, {}
        for s in SPECTRA:
            heads[s], banks[s] = split_tokens(tokens[s])
        return cls(cls=heads, patches=banks)


@dataclass(frozen=True)
class FusedFeature:
    f_tp: Tensor
    tokens: dict[str, Tensor]

    def segment(self, stream: str) -> Tensor:
        return self.tokens[stream]


class TokenPermutation(Module):
    """Holds one :class:`PermutationUnit` per (stage, stream), or per stage
    when ``share_across_streams`` is set."""

    def __init__(
        self,
        rng: np.random.Generator,
        dim: int,
        heads: int,
        ffn_ratio: float = 4.0,
        num_stages: int = 3,
        share_across_streams: bool = False,
    ):
        if num_stages not in (1, 2, 3):
            raise ValueError(f"num_stages must be 1, 2 or 3, got {num_stages}")
        self.num_stages = num_stages
        self.share_across_streams = share_across_streams
        self.units: dict[str, PermutationUnit] = {}
        for k in range(1, num_stages + 1):
            if share_across_streams:
                self.units[f"{k}"] = PermutationUnit(rng, dim, heads, ffn_ratio)
            else:
                for s in SPECTRA:
                    self.units[f"{k}{s}"] = PermutationUnit(rng, dim, heads, ffn_ratio)

    def unit(self, stage: int, stream: str) -> PermutationUnit:
        return self.units[f"{stage}" if self.share_across_streams else f"{stage}{stream}"]

    def stage(self, state: PermutationState, k: int) -> PermutationState:
        if state.stage != k - 1 or not 1 <= k <= self.num_stages:
            raise ValueError(f"cannot run stage {k} on a state at stage {state.stage} (num_stages={self.num_stages})")
        new_cls = {s: permute_step(state.cls[s], state.patches[shift(s, k)], self.unit(k, s)) for s in SPECTRA}
        return PermutationState(
            cls=new_cls, patches=state.patches, stage=k, history=state.history + [state.cls]
        )

    def fuse(self, state: PermutationState) -> FusedFeature:
        if state.stage != self.num_stages:
            raise ValueError(f"fuse expects a state at stage {self.num_stages}, got stage {state.stage}")
        return FusedFeature(f_tp=T.concat([state.cls[s] for s in SPECTRA], axis=-1), tokens=dict(state.cls))

    def __call__(self, f_r: Tensor, f_n: Tensor, f_t: Tensor) -> FusedFeature:
        state = PermutationState.from_tokens({"R": f_r, "N": f_n, "T": f_t})
        for k in range(1, self.num_stages + 1):
            state = self.stage(state, k)
        return self.fuse(state)


def tpm_stage(tpm: TokenPermutation, state: PermutationState, k: int) -> PermutationState:
    return tpm.stage(state, k)


def fuse(tpm: TokenPermutation, state: PermutationState) -> FusedFeature:
    return tpm.fuse(state)


def run_tpm(tpm: TokenPermutation, f_r: Tensor, f_n: Tensor, f_t: Tensor) -> FusedFeature:
    return tpm(f_r, f_n, f_t)
