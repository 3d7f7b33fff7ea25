"""Single-query retrieval evaluation: distances, CMC Rank-k and mAP."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentConfig, eval_image
from .model import MultiBranchModel, extract_concat_features, images_to_tensor

log = logging.getLogger(__name__)

METRICS = ("euclidean", "cosine")
JUNK_IDS = (-1,)


@dataclass
class FeatureTable:
    vectors: np.ndarray
    identities: np.ndarray
    cameras: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.identities = np.asarray(self.identities, dtype=np.int64)
        self.cameras = np.asarray(self.cameras, dtype=np.int64)
        n = len(self.vectors)
        if self.vectors.ndim != 2 or len(self.identities) != n or len(self.cameras) != n:
            raise ValueError("feature table rows are inconsistent")
        if not np.isfinite(self.vectors).all():
            raise ValueError("feature table contains non-finite values")

    def __len__(self):
        return len(self.vectors)

    def save(self, path) -> Path:
        """Write ``<path>.npy`` (vectors) and ``<path>.json`` (ids, cams)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path.with_suffix(".npy"), self.vectors)
        sidecar = {"identities": self.identities.tolist(), "cameras": self.cameras.tolist(),
                   "dim": int(self.vectors.shape[1]), "count": len(self)}
        path.with_suffix(".json").write_text(json.dumps(sidecar))
        return path.with_suffix(".npy")

    @classmethod
    def load(cls, path) -> "FeatureTable":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        return cls(np.load(path.with_suffix(".npy")), meta["identities"], meta["cameras"])


@dataclass
class MetricsReport:
    rank_k: dict
    mAP: float
    per_query_ap: list = field(default_factory=list)
    num_valid_queries: int = 0

    def to_json(self) -> dict:
        out = {f"rank{k}": float(v) for k, v in sorted(self.rank_k.items())}
        out["mAP"] = float(self.mAP)
        out["num_valid_queries"] = int(self.num_valid_queries)
        return out


def pairwise_distances(queries, gallery, metric: str = "euclidean") -> np.ndarray:
    q = queries.vectors if isinstance(queries, FeatureTable) else np.asarray(queries, dtype=np.float64)
    g = gallery.vectors if isinstance(gallery, FeatureTable) else np.asarray(gallery, dtype=np.float64)
    if q.shape[1] != g.shape[1]:
        raise ValueError(f"feature dimension mismatch: {q.shape[1]} vs {g.shape[1]}")
    if metric == "euclidean":
        # explicit differences, chunked over queries; the dot-product expansion
        # loses too much precision near zero distance
        out = np.empty((len(q), len(g)))
        step = max(1, int(4e6 // max(1, len(g) * q.shape[1])))
        for s in range(0, len(q), step):
            diff = q[s:s + step, None, :] - g[None, :, :]
            out[s:s + step] = np.sqrt((diff ** 2).sum(-1))
        return out
    if metric == "cosine":
        qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
        gn = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
        return np.clip(1.0 - qn @ gn.T, 0.0, 2.0)
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def evaluate_cmc_map(distmat, q_ids, q_cams, g_ids, g_cams, ranks=(1, 5, 10),
                     junk_ids=JUNK_IDS) -> MetricsReport:
    """CMC and mAP under the single-query, cross-camera protocol.

    For each query, gallery entries with the same identity and camera, and
    gallery entries carrying a junk id, are removed before ranking. Ties are
    broken by gallery index. Queries left without any relevant gallery entry
    do not count.
    """
    distmat = np.asarray(distmat, dtype=np.float64)
    q_ids, q_cams = np.asarray(q_ids), np.asarray(q_cams)
    g_ids, g_cams = np.asarray(g_ids), np.asarray(g_cams)
    if not np.isfinite(distmat).all():
        raise ValueError("distance matrix contains non-finite values")
    if distmat.shape != (len(q_ids), len(g_ids)):
        raise ValueError(f"distance matrix shape {distmat.shape} does not match ids")

    order = np.argsort(distmat, axis=1, kind="stable")
    junk_gallery = np.isin(g_ids, junk_ids)
    hits = np.zeros(len(ranks))
    aps = []
    for i in range(len(q_ids)):
        idx = order[i]
        keep = ~((g_ids[idx] == q_ids[i]) & (g_cams[idx] == q_cams[i])) & ~junk_gallery[idx]
        if not keep.any():
            log.warning("query %d has no gallery entries left after exclusion", i)
            continue
        relevant = (g_ids[idx][keep] == q_ids[i])
        if not relevant.any():
            continue
        positions = np.flatnonzero(relevant)
        hits += positions[0] < np.asarray(ranks)
        precision = np.arange(1, len(positions) + 1) / (positions + 1)
        aps.append(float(precision.mean()))
    n = len(aps)
    if n == 0:
        log.warning("no valid queries")
        return MetricsReport({k: 0.0 for k in ranks}, 0.0, [], 0)
    return MetricsReport({k: float(h / n) for k, h in zip(ranks, hits)},
                         float(np.mean(aps)), aps, n)


def extract_features(model: MultiBranchModel, dataset, augment_config: AugmentConfig,
                     batch_size: int = 128) -> FeatureTable:
    feats = []
    for start in range(0, len(dataset), batch_size):
        chunk = dataset.samples[start:start + batch_size]
        x = images_to_tensor([eval_image(s.pixels, augment_config) for s in chunk], augment_config)
        feats.append(extract_concat_features(model, x).double().numpy())
    dim = model.num_branches * model.embedding_dim
    vectors = np.concatenate(feats) if feats else np.zeros((0, dim))
    return FeatureTable(vectors, dataset.identities, dataset.cameras)


def evaluate_model(model: MultiBranchModel, query, gallery, augment_config: AugmentConfig,
                   metric: str = "cosine", batch_size: int = 128) -> MetricsReport:
    with torch.no_grad():
        qf = extract_features(model, query, augment_config, batch_size)
        gf = extract_features(model, gallery, augment_config, batch_size)
    dist = pairwise_distances(qf, gf, metric)
    return evaluate_cmc_map(dist, qf.identities, qf.cameras, gf.identities, gf.cameras)
