"""Spectrum-specific ViT encoders.

Each spectrum (``"R"``, ``"N"``, ``"T"``) gets its own encoder; nothing is
shared between streams. Token matrices are ``(..., M+1, D)`` tensors with the
class token in row 0 and the ``M`` patch tokens after it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Block, Linear, Module, parameter, trunc_normal
from .tensor import Tensor

SPECTRA = ("R", "N", "T")
SPECTRUM_NAMES = {"R": "RGB", "N": "NIR", "T": "TIR"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    image_height: int = 64
    image_width: int = 32
    channels: int = 3
    patch_size: int = 16
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    ffn_ratio: float = 4.0
    tpm_attach_layer: int = 0  # 0 means "last layer"
    dropout: float = 0.0

    def __post_init__(self):
        if self.patch_size <= 0 or self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ConfigError(
                f"image {self.image_height}x{self.image_width} is not divisible into {self.patch_size}px patches"
            )
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.depth < 0:
            raise ConfigError("depth must be >= 0")
        if not 0 <= self.tpm_attach_layer <= self.depth:
            raise ConfigError(f"tpm_attach_layer {self.tpm_attach_layer} outside 1..{self.depth}")

    @property
    def num_patches(self) -> int:
        return (self.image_height // self.patch_size) * (self.image_width // self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def tap_layer(self) -> int:
        return self.tpm_attach_layer or self.depth


def patchify(image, patch_size: int) -> Tensor:
    """Split ``(..., H, W, C)`` images into row-major, channel-last flattened
    non-overlapping patches of shape ``(..., M, P*P*C)``."""
    if not isinstance(image, Tensor):
        image = Tensor(image)
    *lead, h, w, c = image.shape
    p = patch_size
    if h % p or w % p:
        raise ConfigError(f"image {h}x{w} is not divisible into {p}px patches")
    nl = len(lead)
    x = image.reshape(tuple(lead) + (h // p, p, w // p, p, c))
    # (..., gh, p, gw, p, c) -> (..., gh, gw, p, p, c)
    x = T.transpose(x, tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4))
    return x.reshape(tuple(lead) + ((h // p) * (w // p), p * p * c))


def split_tokens(tokens: Tensor) -> tuple[Tensor, Tensor]:
    return tokens[..., 0, :], tokens[..., 1:, :]


def join_tokens(cls: Tensor, patches: Tensor) -> Tensor:
    *lead, dim = cls.shape
    return T.concat([cls.reshape(tuple(lead) + (1, dim)), patches], axis=-2)


class ViTEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.patch_embed = Linear(rng, cfg.patch_dim, cfg.embed_dim)
        self.cls_token = parameter(trunc_normal(rng, (cfg.embed_dim,)))
        self.pos_embed = parameter(trunc_normal(rng, (cfg.num_patches + 1, cfg.embed_dim)))
        self.blocks = [Block(rng, cfg.embed_dim, cfg.heads, cfg.ffn_ratio, cfg.dropout) for _ in range(cfg.depth)]

    def embed(self, patches: Tensor) -> Tensor:
        if patches.shape[-2:] != (self.cfg.num_patches, self.cfg.patch_dim):
            raise T.ShapeError(
                f"expected patches of shape (..., {self.cfg.num_patches}, {self.cfg.patch_dim}), got {patches.shape}"
            )
        x = self.patch_embed(patches)
        lead = x.shape[:-2]
        cls = self.cls_token
        for n in reversed(lead):
            cls = T.repeat_leading(cls, n)
        return T.add(join_tokens(cls, x), self.pos_embed)

    def encode_to_layer(self, image, layer: int) -> Tensor:
        if not 0 <= layer <= self.cfg.depth:
            raise ConfigError(f"layer {layer} outside 0..{self.cfg.depth}")
        x = self.embed(patchify(image, self.cfg.patch_size))
        for block in self.blocks[:layer]:
            x = block(x)
        return x

    def encode(self, image) -> Tensor:
        return self.encode_to_layer(image, self.cfg.depth)

    def encode_with_tap(self, image, tap: int) -> tuple[Tensor, Tensor]:
        """Final-layer tokens plus the tokens after block ``tap``, in one pass."""
        x = self.embed(patchify(image, self.cfg.patch_size))
        tapped = x
        for i, block in enumerate(self.blocks, start=1):
            x = block(x)
            if i == tap:
                tapped = x
        return x, tapped


class MultiStreamEncoder(Module):
    """Three independent encoders keyed by spectrum id."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.streams = {s: ViTEncoder(cfg, rng) for s in SPECTRA}

    def _stream(self, stream: str) -> ViTEncoder:
        try:
            return self.streams[stream]
        except KeyError:
            raise ValueError(f"unknown stream {stream!r}; expected one of {SPECTRA}") from None

    def encode(self, stream: str, image) -> Tensor:
        return self._stream(stream).encode(image)

    def encode_to_layer(self, stream: str, image, layer: int) -> Tensor:
        if not 1 <= layer <= self.cfg.depth:
            raise ConfigError(f"layer {layer} outside 1..{self.cfg.depth}")
        return self._stream(stream).encode_to_layer(image, layer)

    def encode_with_tap(self, stream: str, image, tap: int) -> tuple[Tensor, Tensor]:
        return self._stream(stream).encode_with_tap(image, tap)
