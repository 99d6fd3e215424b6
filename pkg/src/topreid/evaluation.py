"""Retrieval metrics (mAP, CMC) and feature export."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .data import Dataset, stack_images
from .model import parse_missing
from .vit import SPECTRA

CMC_RANKS = (1, 5, 10)


@dataclass
class EvalSplit:
    query_features: np.ndarray
    query_ids: np.ndarray
    query_cams: np.ndarray
    gallery_features: np.ndarray
    gallery_ids: np.ndarray
    gallery_cams: np.ndarray


@dataclass
class EvalReport:
    mAP: float
    cmc: dict[int, float]
    num_valid_queries: int
    num_queries: int
    excluded_queries: list[int] = field(default_factory=list)
    missing_set: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mAP": self.mAP,
            "cmc": {str(k): v for k, v in sorted(self.cmc.items())},
            "num_valid_queries": self.num_valid_queries,
            "num_queries": self.num_queries,
            "excluded_queries": list(self.excluded_queries),
            "missing_set": sorted(self.missing_set),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def distance_matrix(q: np.ndarray, g: np.ndarray, metric: str = "cosine") -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ValueError(f"feature dims differ: {q.shape} vs {g.shape}")
    if metric == "euclidean":
        diff = q[:, None, :] - g[None, :, :]
        return np.sqrt((diff * diff).sum(-1))
    if metric != "cosine":
        raise ValueError(f"unknown metric {metric!r}")
    for name, m in (("query", q), ("gallery", g)):
        norms = np.linalg.norm(m, axis=1)
        zero = np.flatnonzero(norms == 0)
        if zero.size:
            raise ValueError(f"{name} sample {int(zero[0])} has a zero-norm feature")
    qn = q / np.linalg.norm(q, axis=1, keepdims=True)
    gn = g / np.linalg.norm(g, axis=1, keepdims=True)
    return 1.0 - qn @ gn.T


def compute_map_cmc(
    dist: np.ndarray,
    q_ids,
    g_ids,
    q_cams,
    g_cams,
    ranks=CMC_RANKS,
    missing_set=(),
) -> EvalReport:
    """Standard re-id protocol: gallery entries sharing both identity and
    camera with the query are dropped; queries left without a true match are
    excluded and listed in the report. Ties rank by gallery index.

    AP and mAP are accumulated as exact fractions and rounded once.
    """
    q_ids, g_ids = np.asarray(q_ids), np.asarray(g_ids)
    q_cams, g_cams = np.asarray(q_cams), np.asarray(g_cams)
    aps, hits_at = [], {k: 0 for k in ranks}
    excluded = []
    for i in range(len(q_ids)):
        order = np.argsort(dist[i], kind="stable")
        keep = ~((g_ids[order] == q_ids[i]) & (g_cams[order] == q_cams[i]))
        matches = g_ids[order][keep] == q_ids[i]
        if not matches.any():
            excluded.append(i)
            continue
        positions = np.flatnonzero(matches)
        # exact rationals so that e.g. hits at ranks 1 and 3 give exactly 5/6
        aps.append(sum(Fraction(k, int(p) + 1) for k, p in enumerate(positions, start=1)) / len(positions))
        for k in ranks:
            hits_at[k] += int(positions[0] < k)
    if not aps:
        raise ValueError("no query has a valid gallery match")
    n = len(aps)
    return EvalReport(
        mAP=float(sum(aps) / n),
        cmc={k: hits_at[k] / n for k in ranks},
        num_valid_queries=n,
        num_queries=len(q_ids),
        excluded_queries=excluded,
        missing_set=sorted(parse_missing(missing_set)),
    )


def extract_features(model, dataset: Dataset, indices=None, missing=(), fill: str = "crm", batch_size: int = 64) -> np.ndarray:
    """Ranking features for ``dataset[indices]``.

    Spectra absent from a sample are treated as missing for that sample, on
    top of the globally missing set.
    """
    missing = parse_missing(missing)
    indices = list(range(len(dataset))) if indices is None else list(indices)
    model.eval()
    out = [None] * len(indices)
    groups: dict[frozenset, list[int]] = {}
    for pos, i in enumerate(indices):
        absent = frozenset(SPECTRA) - dataset[i].present
        groups.setdefault(missing | absent, []).append(pos)
    for miss, positions in sorted(groups.items(), key=lambda kv: sorted(kv[0])):
        for start in range(0, len(positions), batch_size):
            chunk = positions[start:start + batch_size]
            images = stack_images([dataset[indices[p]] for p in chunk])
            feats = model.features(images, miss, fill)
            for p, f in zip(chunk, feats):
                out[p] = f
    model.train()
    return np.stack(out)


def evaluate(model, dataset: Dataset, missing_set=(), metric: str = "cosine", fill: str = "crm") -> EvalReport:
    missing = parse_missing(missing_set)
    if len(missing) > 2:
        raise ValueError("at most two spectra may be missing")
    query, gallery = dataset.split_query_gallery()
    feats = extract_features(model, dataset, query + gallery, missing, fill)
    qf, gf = feats[: len(query)], feats[len(query):]
    ids = np.array([t.identity for t in dataset.triples])
    cams = np.array([t.camera for t in dataset.triples])
    dist = distance_matrix(qf, gf, metric)
    return compute_map_cmc(dist, ids[query], ids[gallery], cams[query], cams[gallery], missing_set=missing)


def export_embeddings(model, dataset: Dataset, path, missing_set=()) -> int:
    """Write one CSV row per sample: identity, camera, present spectra, then
    the feature columns ``f0..f{n-1}``. Returns the number of data rows."""
    feats = extract_features(model, dataset, missing=missing_set)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["identity", "camera", "present"] + [f"f{j}" for j in range(feats.shape[1])])
        for t, f in zip(dataset.triples, feats):
            present = "".join(s for s in SPECTRA if s in t.present)
            writer.writerow([t.identity, t.camera, present] + [f"{v:.9g}" for v in f])
    return len(feats)


def read_embeddings(path) -> tuple[np.ndarray, np.ndarray, list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    ids = np.array([int(r[0]) for r in body])
    cams = np.array([int(r[1]) for r in body])
    present = [r[2] for r in body]
    feats = np.array([[float(v) for v in r[3:]] for r in body])
    return ids, cams, present, feats
