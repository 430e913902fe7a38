"""Binarized nearest-neighbor affinity and positive / hard-negative pair mining.

Row i of the affinity matrix marks the k nearest neighbors of image i under a
precomputed distance matrix (self excluded, distance ties broken by ascending
index). Positive training pairs are drawn from those entries; negatives come
from the hard band just outside the neighborhood, ranks k+1 through a bound
that defaults to half the dataset size.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

POSITIVE = 1
NEGATIVE = 0


@dataclass(frozen=True)
class AffinityMatrix:
    """0/1 neighbor matrix; every row sums to k and the diagonal is zero."""

    entries: np.ndarray
    k: int

    def __post_init__(self) -> None:
        entries = np.asarray(self.entries, dtype=np.uint8)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise ValueError("affinity matrix must be square")
        if np.any(np.diag(entries) != 0):
            raise ValueError("affinity diagonal must be zero")
        if np.any(entries.sum(axis=1) != self.k):
            raise ValueError(f"every affinity row must sum to k={self.k}")
        object.__setattr__(self, "entries", entries)

    @property
    def n(self) -> int:
        return int(self.entries.shape[0])


@dataclass(frozen=True)
class PairBatch:
    """Labeled (i, j, label) pairs drawn from the sampling pools."""

    pairs: tuple[tuple[int, int, int], ...]
    seed: int
    n_bound: int


def _check_distances(dist: np.ndarray) -> np.ndarray:
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
        raise ValueError("distance matrix must be square")
    if np.any(np.diag(dist) != 0):
        raise ValueError("distance matrix must have a zero diagonal")
    if not np.array_equal(dist, dist.T):
        raise ValueError("distance matrix must be symmetric")
    return dist


def neighbor_order(dist: np.ndarray, i: int) -> np.ndarray:
    """Non-self column indices of row i, by ascending distance then ascending index."""
    n = dist.shape[0]
    others = np.concatenate([np.arange(i), np.arange(i + 1, n)])
    return others[np.argsort(dist[i, others], kind="stable")]


def build_affinity(dist: np.ndarray, k_a: int) -> AffinityMatrix:
    """Mark each image's k_a nearest neighbors. Not symmetric in general."""
    dist = _check_distances(dist)
    n = dist.shape[0]
    if not 1 <= k_a <= n - 1:
        raise ValueError(f"k_a must be in [1, {n - 1}], got {k_a}")
    entries = np.zeros((n, n), dtype=np.uint8)
    for i in range(n):
        entries[i, neighbor_order(dist, i)[:k_a]] = 1
    return AffinityMatrix(entries, int(k_a))


def rank_of(dist: np.ndarray, i: int, j: int) -> int:
    """1-based position of j in i's neighbor ordering (distance, then index)."""
    dist = np.asarray(dist, dtype=np.float64)
    if i == j:
        raise ValueError("rank is undefined for i == j")
    row = dist[i]
    d_j = row[j]
    closer = (row < d_j) | ((row == d_j) & (np.arange(row.size) < j))
    closer[i] = False
    return int(np.count_nonzero(closer)) + 1


def _neighbor_ranks(dist: np.ndarray, i: int) -> np.ndarray:
    """ranks[j] = rank of j for query i; ranks[i] = 0."""
    order = neighbor_order(dist, i)
    ranks = np.zeros(dist.shape[0], dtype=np.int64)
    ranks[order] = np.arange(1, order.size + 1)
    return ranks


def default_rank_bound(n: int) -> int:
    """Hard-negative rank bound: half the dataset size (floor)."""
    return n // 2


class PairSampler:
    """Sampling pools built once from an affinity matrix and its distances.

    Positives are the affinity entries; negatives are the (i, j) whose rank
    lies in (k, n_bound]. Each batch is drawn uniformly without replacement
    within itself; separate batches draw independently.
    """

    def __init__(self, affinity: AffinityMatrix, dist: np.ndarray, n_bound: int):
        dist = _check_distances(dist)
        n = affinity.n
        if dist.shape[0] != n:
            raise ValueError("affinity and distance matrix sizes differ")
        if n_bound <= affinity.k:
            raise ValueError(f"negative rank bound must exceed k={affinity.k}, got {n_bound}")
        self.k = affinity.k
        self.n_bound = int(n_bound)

        self.positives = np.argwhere(affinity.entries == POSITIVE)
        negative_rows = []
        for i in range(n):
            ranks = _neighbor_ranks(dist, i)
            js = np.nonzero((ranks > affinity.k) & (ranks <= n_bound))[0]
            negative_rows.append(np.stack([np.full(js.size, i, dtype=np.int64), js], axis=1))
        self.negatives = np.concatenate(negative_rows, axis=0)
        if self.positives.shape[0] == 0:
            raise ValueError("positive pair pool is empty")
        if self.negatives.shape[0] == 0:
            raise ValueError("negative pair pool is empty")

    def sample(self, rng: np.random.Generator, n_pos: int, n_neg: int) -> list[tuple[int, int, int]]:
        if n_pos > self.positives.shape[0]:
            raise ValueError(f"requested {n_pos} positives, pool has {self.positives.shape[0]}")
        if n_neg > self.negatives.shape[0]:
            raise ValueError(f"requested {n_neg} negatives, pool has {self.negatives.shape[0]}")
        picked_pos = self.positives[rng.choice(self.positives.shape[0], size=n_pos, replace=False)]
        picked_neg = self.negatives[rng.choice(self.negatives.shape[0], size=n_neg, replace=False)]
        batch = [(int(i), int(j), POSITIVE) for i, j in picked_pos]
        batch += [(int(i), int(j), NEGATIVE) for i, j in picked_neg]
        return batch


def sample_pairs(
    affinity: AffinityMatrix,
    dist: np.ndarray,
    n_pos: int,
    n_neg: int,
    n_bound: int,
    seed: int,
) -> PairBatch:
    """One uniformly drawn batch of labeled pairs, deterministic in the seed."""
    sampler = PairSampler(affinity, dist, n_bound)
    rng = np.random.default_rng(seed)
    return PairBatch(tuple(sampler.sample(rng, n_pos, n_neg)), int(seed), int(n_bound))


def save_affinity(path: str | Path, affinity: AffinityMatrix) -> None:
    """Export as line-delimited sparse rows: {"i", "neighbors"}."""
    lines = [
        json.dumps({"i": i, "neighbors": np.nonzero(affinity.entries[i])[0].tolist()}, sort_keys=True)
        for i in range(affinity.n)
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def load_affinity(path: str | Path) -> AffinityMatrix:
    records = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    if not records:
        raise ValueError(f"{path}: empty affinity export")
    n = len(records)
    k = len(records[0]["neighbors"])
    entries = np.zeros((n, n), dtype=np.uint8)
    for record in records:
        entries[int(record["i"]), np.asarray(record["neighbors"], dtype=np.int64)] = 1
    return AffinityMatrix(entries, k)


def save_pairs(path: str | Path, batch: PairBatch) -> None:
    """Export as line-delimited {"i", "j", "label"} records."""
    lines = [json.dumps({"i": i, "j": j, "label": label}, sort_keys=True) for i, j, label in batch.pairs]
    Path(path).write_text("\n".join(lines) + "\n")


def load_pairs(path: str | Path) -> list[tuple[int, int, int]]:
    records = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    return [(int(r["i"]), int(r["j"]), int(r["label"])) for r in records]
