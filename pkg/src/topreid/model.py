"""The full multi-spectral re-identification model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .crm import ComplementaryReconstruction
from .losses import LossTerms, label_smoothing_ce, triplet_loss
from .nn import Linear, Module
from .tensor import Tensor
from .tpm import FusedFeature, TokenPermutation
from .vit import SPECTRA, EncoderConfig, MultiStreamEncoder

LOSS_MODES = ("AL", "BL")
FILL_MODES = ("crm", "zeros")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    num_classes: int = 16
    loss_mode: str = "AL"
    use_tpm: bool = True
    use_crm: bool = True
    num_stages: int = 3
    share_tpm_across_streams: bool = False
    crm_depth: int = 1
    crm_loss: str = "mse"
    crm_reduction: str = "mean"
    detach_targets: bool = False
    margin: float = 0.3
    label_smoothing: float = 0.1
    head_bias: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    @property
    def feature_dim(self) -> int:
        return 3 * self.encoder.embed_dim


@dataclass
class ForwardOutput:
    tokens: dict[str, Tensor]  # final-layer token matrices
    tapped: dict[str, Tensor]  # TPM / CRM input tokens
    fused: FusedFeature | None
    recons: dict[str, Tensor] | None


def parse_missing(spec) -> frozenset[str]:
    """Accept ``"NIR,TIR"``, ``"N,T"``, ``{"N", "T"}`` or ``None``."""
    if spec is None:
        return frozenset()
    if isinstance(spec, str):
        items = [s.strip() for s in spec.split(",") if s.strip()]
    else:
        items = list(spec)
    aliases = {"R": "R", "RGB": "R", "N": "N", "NIR": "N", "T": "T", "TIR": "T"}
    out = set()
    for item in items:
        key = aliases.get(str(item).upper())
        if key is None:
            raise ValueError(f"unknown spectrum {item!r}; use R/RGB, N/NIR or T/TIR")
        out.add(key)
    if len(out) == len(SPECTRA):
        raise ValueError("at least one spectrum must remain available")
    return frozenset(out)


class TopReID(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        enc = cfg.encoder
        rng = np.random.default_rng(cfg.seed)
        d, c = enc.embed_dim, cfg.num_classes
        self.encoders = MultiStreamEncoder(enc, rng)
        self.tpm = (
            TokenPermutation(rng, d, enc.heads, enc.ffn_ratio, cfg.num_stages, cfg.share_tpm_across_streams)
            if cfg.use_tpm
            else None
        )
        self.crm = (
            ComplementaryReconstruction(
                rng, d, enc.heads, enc.ffn_ratio, cfg.crm_depth, cfg.crm_loss, cfg.detach_targets, cfg.crm_reduction
            )
            if cfg.use_crm
            else None
        )
        if cfg.loss_mode == "BL":
            self.vit_heads = {s: Linear(rng, d, c, bias=cfg.head_bias) for s in SPECTRA}
        else:
            self.vit_heads = {"cat": Linear(rng, 3 * d, c, bias=cfg.head_bias)}
        self.tp_head = Linear(rng, 3 * d, c, bias=cfg.head_bias) if cfg.use_tpm else None

    # -- forward passes ---------------------------------------------------
    def _encode(self, images: dict[str, np.ndarray], streams) -> tuple[dict, dict]:
        tap = self.cfg.encoder.tap_layer
        final, tapped = {}, {}
        for s in streams:
            final[s], tapped[s] = self.encoders.encode_with_tap(s, images[s], tap)
        return final, tapped

    def forward(self, images: dict[str, np.ndarray]) -> ForwardOutput:
        final, tapped = self._encode(images, SPECTRA)
        fused = self.tpm(tapped["R"], tapped["N"], tapped["T"]) if self.tpm is not None else None
        recons = self.crm.reconstruct_all(tapped) if self.crm is not None else None
        return ForwardOutput(final, tapped, fused, recons)

    def complete_tokens(self, images, missing=(), fill: str = "crm") -> tuple[dict, dict]:
        """Encode available spectra and substitute token matrices for missing ones."""
        missing = parse_missing(missing)
        if fill not in FILL_MODES:
            raise ValueError(f"fill must be one of {FILL_MODES}, got {fill!r}")
        available = [s for s in SPECTRA if s not in missing]
        final, tapped = self._encode(images, available)
        if missing:
            if fill == "crm":
                if self.crm is None:
                    raise ValueError("missing-spectrum reconstruction needs a model trained with CRM")
                filled = self.crm.reconstruct_missing({s: tapped[s] for s in available}, missing)
            else:
                ref = tapped[available[0]]
                filled = {s: T.zeros(ref.shape) for s in missing}
            for s, tokens in filled.items():
                tapped[s] = tokens
                final[s] = tokens
        return final, tapped

    def forward_with_missing(self, images, missing=(), fill: str = "crm") -> Tensor:
        """Ranking feature with the given spectra absent (``f_tp`` with TPM,
        otherwise the concatenated class tokens)."""
        final, tapped = self.complete_tokens(images, missing, fill)
        if self.tpm is not None:
            return self.tpm(tapped["R"], tapped["N"], tapped["T"]).f_tp
        return T.concat([final[s][..., 0, :] for s in SPECTRA], axis=-1)

    def features(self, images, missing=(), fill: str = "crm") -> np.ndarray:
        with T.no_grad():
            return self.forward_with_missing(images, missing, fill).data

    # -- objective --------------------------------------------------------
    def loss_terms(self, images: dict[str, np.ndarray], labels) -> LossTerms:
        cfg = self.cfg
        out = self.forward(images)
        cls = {s: out.tokens[s][:, 0, :] for s in SPECTRA}
        terms = LossTerms()
        if cfg.loss_mode == "BL":
            ce = tri = None
            for s in SPECTRA:
                c_s = label_smoothing_ce(self.vit_heads[s](cls[s]), labels, cfg.label_smoothing)
                t_s = triplet_loss(cls[s], labels, cfg.margin)
                ce = c_s if ce is None else T.add(ce, c_s)
                tri = t_s if tri is None else T.add(tri, t_s)
            terms.l_ce_vit, terms.l_tri_vit = ce, tri
        else:
            cat = T.concat([cls[s] for s in SPECTRA], axis=-1)
            terms.l_ce_vit = label_smoothing_ce(self.vit_heads["cat"](cat), labels, cfg.label_smoothing)
            terms.l_tri_vit = triplet_loss(cat, labels, cfg.margin)
        if out.fused is not None:
            f_tp = out.fused.f_tp
            terms.l_ce_tp = label_smoothing_ce(self.tp_head(f_tp), labels, cfg.label_smoothing)
            terms.l_tri_tp = triplet_loss(f_tp, labels, cfg.margin)
        if out.recons is not None:
            terms.l_cr = self.crm.loss(out.recons, out.tapped)
        return terms
