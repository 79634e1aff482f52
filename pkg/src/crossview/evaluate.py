"""Descriptor indexing and retrieval metrics.

Rankings are by ascending L2 distance over unit descriptors (equivalently
descending cosine), with ties broken by ascending reference id so reports
are reproducible bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError

UNIT_NORM_TOL = 1e-5


@dataclass(frozen=True)
class LabelSet:
    """Relevance sets for one query; positives and semi-positives disjoint."""

    positives: frozenset = frozenset()
    semi_positives: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "positives", frozenset(self.positives))
        object.__setattr__(self, "semi_positives", frozenset(self.semi_positives))
        if self.positives & self.semi_positives:
            raise ContractError("positive and semi-positive sets must be disjoint")


@dataclass
class DescriptorIndex:
    """Reference gallery: unit descriptor rows with unique integer ids."""

    vectors: np.ndarray  # (N_ref, dim)
    ids: np.ndarray  # (N_ref,)

    def __len__(self):
        return len(self.ids)


def build_index(vectors, ids=None):
    vectors = np.ascontiguousarray(np.asarray(vectors, dtype=np.float64))
    if vectors.ndim != 2:
        raise ShapeError("index vectors must be (N_ref, dim)")
    norms = np.linalg.norm(vectors, axis=1)
    if np.abs(norms - 1.0).max(initial=0.0) > UNIT_NORM_TOL:
        raise ContractError("index rows must be unit-norm within 1e-5")
    if ids is None:
        ids = np.arange(len(vectors))
    ids = np.asarray(ids, dtype=np.int64)
    if len(ids) != len(vectors):
        raise ShapeError("ids length must match vector count")
    if len(np.unique(ids)) != len(ids):
        raise ContractError("reference ids must be unique")
    return DescriptorIndex(vectors=vectors, ids=ids)


def rank_all(queries, index):
    """Full ranking of reference ids per query, nearest first.

    Ascending L2 distance; exact ties broken by ascending id.
    """
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != index.vectors.shape[1]:
        raise ShapeError(
            f"query dim {q.shape} does not match index dim {index.vectors.shape}"
        )
    qsq = (q * q).sum(axis=1, keepdims=True)
    rsq = (index.vectors * index.vectors).sum(axis=1)
    d2 = np.maximum(qsq + rsq[None, :] - 2.0 * (q @ index.vectors.T), 0.0)
    rankings = np.empty((len(q), len(index)), dtype=np.int64)
    for i in range(len(q)):
        order = np.lexsort((index.ids, d2[i]))
        rankings[i] = index.ids[order]
    return rankings


def recall_at_k(rankings, labels, k):
    """Fraction of queries with any positive among the top k."""
    if k < 1:
        raise ContractError("k must be >= 1")
    hits = 0
    for ranking, label in zip(rankings, labels):
        if any(int(r) in label.positives for r in ranking[:k]):
            hits += 1
    return hits / len(rankings)


def one_percent_k(n_ref):
    """Top-1% cutoff: ceil(N_ref / 100)."""
    return max(1, math.ceil(n_ref / 100))


def recall_at_one_percent(rankings, labels):
    return recall_at_k(rankings, labels, one_percent_k(rankings.shape[1]))


def hit_rate(rankings, labels):
    """Rank-1 accuracy where semi-positives also count as correct."""
    hits = 0
    for ranking, label in zip(rankings, labels):
        top = int(ranking[0])
        if top in label.positives or top in label.semi_positives:
            hits += 1
    return hits / len(rankings)


def average_precision(ranking, label):
    """AP with semi-positives skipped from the ranking entirely.

    Returns None when the query has no positive at all.
    """
    if not label.positives:
        return None
    precisions = []
    seen = 0
    rank = 0
    for r in ranking:
        r = int(r)
        if r in label.semi_positives:
            continue
        rank += 1
        if r in label.positives:
            seen += 1
            precisions.append(seen / rank)
    if not precisions:
        return None
    return sum(precisions) / len(label.positives)


def mean_average_precision(rankings, labels):
    """Mean AP over queries that have positives; returns (map, n_skipped)."""
    values = []
    skipped = 0
    for ranking, label in zip(rankings, labels):
        ap = average_precision(ranking, label)
        if ap is None:
            skipped += 1
        else:
            values.append(ap)
    if not values:
        return 0.0, skipped
    return sum(values) / len(values), skipped


@dataclass
class RetrievalReport:
    r_at: dict = field(default_factory=dict)  # K -> fraction
    r_at_1pct: float = 0.0
    hit_rate: float = 0.0
    map: float = 0.0
    n_queries: int = 0
    n_queries_without_positive: int = 0

    def to_dict(self):
        return {
            "r_at": {str(k): v for k, v in self.r_at.items()},
            "r_at_1pct": self.r_at_1pct,
            "hit_rate": self.hit_rate,
            "map": self.map,
            "n_queries": self.n_queries,
            "n_queries_without_positive": self.n_queries_without_positive,
        }


def evaluate_retrieval(queries, index, labels, ks=(1, 5, 10)):
    """Rank every query and compute the full metric suite."""
    if len(labels) != len(queries):
        raise ShapeError("one LabelSet per query required")
    rankings = rank_all(queries, index)
    ks = [k for k in ks if k <= len(index)] or [1]
    mapv, skipped = mean_average_precision(rankings, labels)
    return RetrievalReport(
        r_at={k: recall_at_k(rankings, labels, k) for k in ks},
        r_at_1pct=recall_at_one_percent(rankings, labels),
        hit_rate=hit_rate(rankings, labels),
        map=mapv,
        n_queries=len(queries),
        n_queries_without_positive=skipped,
    )


def self_match_labels(ids):
    """Diagonal-positive labels: query i's sole positive is reference ids[i]."""
    return [LabelSet(positives=frozenset({int(i)})) for i in ids]


def save_index(index, path):
    """Persist a descriptor index in the binary checkpoint format."""
    from .checkpoint import save_checkpoint

    save_checkpoint(
        path,
        {"vectors": index.vectors.astype(np.float32)},
        meta={"kind": "descriptor_index", "ids": [int(i) for i in index.ids]},
    )


def load_index(path):
    from .checkpoint import load_checkpoint

    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "descriptor_index":
        raise ContractError(f"{path} is not a descriptor index checkpoint")
    return build_index(arrays["vectors"].astype(np.float64), meta["ids"])


def report_json(report, config_hash=None, checkpoint_hash=None):
    doc = report.to_dict()
    doc["config_hash"] = config_hash
    doc["checkpoint_hash"] = checkpoint_hash
    return json.dumps(doc, indent=2, sort_keys=True)
