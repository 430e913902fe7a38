"""Exact Euclidean nearest-neighbor search over context features, scored as
multi-label retrieval.

The classes present in the retrieved annotations form the prediction, the
query's own classes the truth, and each query scores

    F_beta = (1 + beta^2) * p * r / (beta^2 * p + r)

with precision defined as 0 for empty predictions and 0/0 := 0. Scores are
averaged over queries; beta = 2 (recall-weighted) is the default elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .dataset import Dataset


@dataclass(frozen=True)
class FeatureIndex:
    """Immutable feature vectors aligned with manifest order, plus their norms."""

    vectors: np.ndarray
    norms: np.ndarray

    def __len__(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])


@dataclass(frozen=True)
class RetrievalResult:
    """Neighbor ids by ascending distance (ties by ascending id)."""

    query: int | None
    ids: np.ndarray
    distances: np.ndarray


def build_index(vectors: np.ndarray) -> FeatureIndex:
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] < 1 or vectors.shape[1] < 1:
        raise ValueError(f"feature vectors must form a non-empty 2-D array, got shape {vectors.shape}")
    if not np.all(np.isfinite(vectors)):
        raise ValueError("feature vectors must be finite")
    return FeatureIndex(vectors, np.sqrt(np.einsum("ij,ij->i", vectors, vectors)))


def knn_query(index: FeatureIndex, query: int | np.ndarray, k_p: int) -> RetrievalResult:
    """The exact k_p nearest vectors by Euclidean distance.

    An integer query selects a stored vector and excludes it from its own
    results; an array query searches all stored vectors. Distance ties break
    by ascending id.
    """
    n = len(index)
    if isinstance(query, (int, np.integer)):
        query_id: int | None = int(query)
        if not 0 <= query_id < n:
            raise ValueError(f"query id {query_id} outside index of {n} vectors")
        q = index.vectors[query_id]
        available = n - 1
    else:
        query_id = None
        q = np.asarray(query, dtype=np.float64)
        if q.shape != (index.dim,):
            raise ValueError(f"query must have dimension {index.dim}, got shape {q.shape}")
        available = n
    if not 1 <= k_p <= available:
        raise ValueError(f"k_p must be in [1, {available}], got {k_p}")

    diff = index.vectors - q
    d_sq = np.einsum("ij,ij->i", diff, diff)
    if query_id is not None:
        d_sq[query_id] = np.inf
    order = np.argsort(d_sq, kind="stable")[:k_p]
    return RetrievalResult(query_id, order.astype(np.int64), np.sqrt(d_sq[order]))


def f_beta_score(predicted: Iterable[int], truth: Iterable[int], beta: float) -> float:
    """F_beta of two label sets. Empty prediction scores precision 0; 0/0 := 0."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    predicted = set(predicted)
    truth = set(truth)
    true_positives = len(predicted & truth)
    precision = true_positives / len(predicted) if predicted else 0.0
    recall = true_positives / len(truth) if truth else 0.0
    beta_sq = beta * beta
    denom = beta_sq * precision + recall
    if denom == 0:
        return 0.0
    return (1 + beta_sq) * precision * recall / denom


def per_query_f_beta(dataset: Dataset, index: FeatureIndex, k_p: int, beta: float) -> np.ndarray:
    """Per-image F_beta, NaN where the query has no labeled pixels.

    The prediction for query i is the union of classes present in its k_p
    retrieved annotations.
    """
    if len(index) != len(dataset):
        raise ValueError(f"index of {len(index)} vectors is not aligned with {len(dataset)} images")
    unlabeled = dataset.classes.unlabeled_id
    class_sets = [set(m.present_classes(unlabeled).tolist()) for m in dataset.label_maps]
    scores = np.full(len(dataset), np.nan)
    for i in range(len(dataset)):
        truth = class_sets[i]
        if not truth:
            continue
        result = knn_query(index, i, k_p)
        predicted: set[int] = set()
        for j in result.ids.tolist():
            predicted |= class_sets[j]
        scores[i] = f_beta_score(predicted, truth, beta)
    return scores


def f_beta_retrieval(dataset: Dataset, index: FeatureIndex, k_p: int, beta: float = 2.0) -> float:
    """Mean per-query F_beta over queries with at least one labeled pixel."""
    scores = per_query_f_beta(dataset, index, k_p, beta)
    valid = scores[~np.isnan(scores)]
    if valid.size == 0:
        raise ValueError("no queries with labeled annotations")
    return float(valid.mean())
