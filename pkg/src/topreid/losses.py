"""Identity supervision: label-smoothed cross-entropy and batch-hard triplet."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


def label_smoothing_ce(logits: Tensor, labels, eps: float = 0.1) -> Tensor:
    """Batch-mean cross-entropy against targets of ``1 - eps`` on the true
    class and ``eps / (C - 1)`` on every other class."""
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"expected {b} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range for {c} classes: {labels.tolist()}")
    off = eps / (c - 1) if c > 1 else 0.0
    target = np.full((b, c), off, dtype=logits.dtype)
    target[np.arange(b), labels] = 1.0 - eps
    logp = T.log_softmax(logits, axis=-1)
    return T.scale(T.sum(T.mul(logp, target)), -1.0 / b)


def pairwise_euclidean(x: Tensor) -> Tensor:
    """``(B, F) -> (B, B)`` Euclidean distances, exactly zero on the diagonal.

    Built from explicit differences rather than the Gram expansion so that
    coincident points give exact zeros.
    """
    b = x.shape[0]
    tiled = T.repeat_leading(x, b)  # [i, j] -> x[j]
    diff = T.sub(T.transpose(tiled, (1, 0, 2)), tiled)  # [i, j] -> x[i] - x[j]
    return T.sqrt(T.sum(T.mul(diff, diff), axis=-1))


def hardest_pairs(dist: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the farthest positive and nearest negative per anchor.

    Ties resolve to the lowest gallery index.
    """
    same = labels[:, None] == labels[None, :]
    pos = np.where(same, dist, -np.inf).argmax(axis=1)
    neg = np.where(~same, dist, np.inf).argmin(axis=1)
    return pos, neg


def triplet_loss(features: Tensor, labels, margin: float = 0.3) -> Tensor:
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("triplet loss needs at least two identities in the batch")
    counts = np.unique(labels, return_counts=True)[1]
    if counts.max() < 2:
        raise ValueError("triplet loss needs two samples of at least one identity")
    dist = pairwise_euclidean(features)
    pos, neg = hardest_pairs(dist.data, labels)
    rows = np.arange(len(labels))
    d_ap = dist[rows, pos]
    d_an = dist[rows, neg]
    return T.mean(T.relu(T.add(T.sub(d_ap, d_an), margin)))


@dataclass
class LossReport:
    l_ce_vit: float
    l_tri_vit: float
    l_ce_tp: float
    l_tri_tp: float
    l_cr: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    def component_sum(self) -> float:
        return self.l_ce_vit + self.l_tri_vit + self.l_ce_tp + self.l_tri_tp + self.l_cr


@dataclass
class LossTerms:
    """Differentiable counterparts of :class:`LossReport` fields."""

    l_ce_vit: Tensor | None = None
    l_tri_vit: Tensor | None = None
    l_ce_tp: Tensor | None = None
    l_tri_tp: Tensor | None = None
    l_cr: Tensor | None = None

    def total(self) -> Tensor:
        terms = [t for t in (self.l_ce_vit, self.l_tri_vit, self.l_ce_tp, self.l_tri_tp, self.l_cr) if t is not None]
        acc = terms[0]
        for t in terms[1:]:
            acc = T.add(acc, t)
        return acc

    def report(self, total: Tensor | None = None) -> LossReport:
        def val(t):
            return 0.0 if t is None else t.item()

        total = self.total() if total is None else total
        return LossReport(
            l_ce_vit=val(self.l_ce_vit),
            l_tri_vit=val(self.l_tri_vit),
            l_ce_tp=val(self.l_ce_tp),
            l_tri_tp=val(self.l_tri_tp),
            l_cr=val(self.l_cr),
            total=total.item(),
        )


def total_loss(model, images, labels) -> tuple[Tensor, LossReport]:
    """Sum of every enabled term; disabled terms report exactly zero."""
    terms = model.loss_terms(images, labels)
    total = terms.total()
    return total, terms.report(total)
