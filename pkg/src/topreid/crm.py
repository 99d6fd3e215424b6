"""Complementary Reconstruction Module.

One TransRe stack per ordered spectrum pair maps a stream's token matrix onto
another stream's. During training the six reconstructions are pulled towards
the real token matrices; at test time they stand in for missing spectra.
"""

from __future__ import annotations

from itertools import permutations

import numpy as np

from . import tensor as T
from .nn import Block, Module
from .tensor import Tensor
from .vit import SPECTRA

PAIRS = tuple(f"{a}2{b}" for a, b in permutations(SPECTRA, 2))
LOSS_VARIANTS = ("mse", "mae", "rmse")
# "sum": per-token norm over the D feature dims; "mean": the same divided by D
REDUCTIONS = ("sum", "mean")


def pair_key(source: str, target: str) -> str:
    if source == target:
        raise ValueError(f"reconstruction needs distinct spectra, got {source}->{target}")
    if source not in SPECTRA or target not in SPECTRA:
        raise ValueError(f"unknown spectrum in pair {source}->{target}")
    return f"{source}2{target}"


class TransRe(Module):
    def __init__(self, rng: np.random.Generator, dim: int, heads: int, ffn_ratio: float = 4.0, depth: int = 1):
        self.blocks = [Block(rng, dim, heads, ffn_ratio) for _ in range(depth)]

    def __call__(self, tokens: Tensor) -> Tensor:
        for block in self.blocks:
            tokens = block(tokens)
        return tokens


class ComplementaryReconstruction(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        dim: int,
        heads: int,
        ffn_ratio: float = 4.0,
        depth: int = 1,
        loss_variant: str = "mse",
        detach_targets: bool = False,
        reduction: str = "sum",
    ):
        if loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"loss variant must be one of {LOSS_VARIANTS}, got {loss_variant!r}")
        if reduction not in REDUCTIONS:
            raise ValueError(f"reduction must be one of {REDUCTIONS}, got {reduction!r}")
        self.blocks = {key: TransRe(rng, dim, heads, ffn_ratio, depth) for key in PAIRS}
        self.loss_variant = loss_variant
        self.detach_targets = detach_targets
        self.reduction = reduction

    def trans_re(self, tokens: Tensor, source: str, target: str) -> Tensor:
        return self.blocks[pair_key(source, target)](tokens)

    def reconstruct_all(self, reals: dict[str, Tensor]) -> dict[str, Tensor]:
        return {f"{a}2{b}": self.trans_re(reals[a], a, b) for a, b in permutations(SPECTRA, 2)}

    def loss(self, recons: dict[str, Tensor], reals: dict[str, Tensor]) -> Tensor:
        if self.detach_targets:
            reals = {s: T.detach(v) for s, v in reals.items()}
        return crm_loss(recons, reals, self.loss_variant, self.reduction)

    def reconstruct_missing(self, available: dict[str, Tensor], missing) -> dict[str, Tensor]:
        return reconstruct_missing(self, available, missing)


def pair_loss(recon: Tensor, real: Tensor, variant: str = "mse", reduction: str = "sum") -> Tensor:
    """Per-token deviation averaged over tokens (and any leading batch axes).

    ``mse``  mean over tokens of the squared L2 norm of the deviation;
    ``mae``  mean over tokens of its L1 norm;
    ``rmse`` square root of the ``mse`` value, taken per sample.

    ``reduction="mean"`` divides each per-token norm by the feature dim.
    """
    if recon.shape != real.shape:
        raise T.ShapeError(f"reconstruction {recon.shape} vs target {real.shape}")
    if reduction not in REDUCTIONS:
        raise ValueError(f"unknown reduction {reduction!r}")
    reduce = T.sum if reduction == "sum" else T.mean
    diff = T.sub(recon, real)
    if variant == "mae":
        return T.mean(reduce(T.abs(diff), axis=-1))
    per_token = reduce(T.mul(diff, diff), axis=-1)
    if variant == "mse":
        return T.mean(per_token)
    if variant == "rmse":
        return T.mean(T.sqrt(T.mean(per_token, axis=-1)))
    raise ValueError(f"unknown loss variant {variant!r}")


def crm_loss(recons: dict[str, Tensor], reals: dict[str, Tensor], variant: str = "mse", reduction: str = "sum") -> Tensor:
    """Sum of the six pairwise terms: L_R = R2N + R2T, likewise N and T."""
    missing = [k for k in PAIRS if k not in recons] + [s for s in SPECTRA if s not in reals]
    if missing:
        raise KeyError(f"reconstruction loss is missing {missing}")
    total = None
    for key in PAIRS:
        term = pair_loss(recons[key], reals[key[-1]], variant, reduction)
        total = term if total is None else T.add(total, term)
    return total


def reconstruct_missing(crm: ComplementaryReconstruction, available: dict[str, Tensor], missing) -> dict[str, Tensor]:
    """Fill each missing spectrum with the mean of its reconstructions from
    every available spectrum."""
    missing = set(missing)
    sources = [s for s in SPECTRA if s in available]
    if not sources:
        raise ValueError("all spectra are missing; nothing to reconstruct from")
    if missing & set(sources):
        raise ValueError(f"spectra {sorted(missing & set(sources))} are both available and missing")
    filled = {}
    for target in SPECTRA:
        if target not in missing:
            continue
        parts = [crm.trans_re(available[s], s, target) for s in sources]
        acc = parts[0]
        for p in parts[1:]:
            acc = T.add(acc, p)
        filled[target] = acc if len(parts) == 1 else T.scale(acc, 1.0 / len(parts))
    return filled
