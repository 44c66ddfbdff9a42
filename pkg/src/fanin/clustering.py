"""Balanced label clusters: the meta-label space for the auxiliary head.

Label representations are positive-instance feature aggregates (the sum
of feature vectors of a label's positive instances, L2-normalized).
Clusters come from recursive balanced spherical 2-means, or from a
uniform random balanced partition for control experiments.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import IO

import numpy as np

from .data import Dataset
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class LabelClustering:
    """Total surjective map label id -> cluster id with balanced sizes."""

    num_clusters: int
    assignment: np.ndarray

    def __post_init__(self):
        self.assignment.flags.writeable = False

    @property
    def num_labels(self) -> int:
        return len(self.assignment)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.num_clusters)

    def validate(self) -> None:
        a = self.assignment
        if len(a) == 0:
            raise ShapeError("empty assignment")
        if a.min() < 0 or a.max() >= self.num_clusters:
            raise ShapeError("cluster id out of range")
        sizes = self.sizes()
        if sizes.max() - sizes.min() > 1:
            raise ShapeError(f"unbalanced clusters: sizes {sizes.min()}.."
                             f"{sizes.max()}")


def default_num_clusters(num_labels: int) -> int:
    """Smallest power of two giving roughly 100 labels per cluster."""
    k = 1
    while k * 100 < num_labels:
        k *= 2
    return k


def build_label_features(ds: Dataset) -> np.ndarray:
    """(L, d_in) matrix: normalized sum of each label's positive instances.

    Labels with no positive instances get a zero row.
    """
    feats = np.zeros((ds.num_labels, ds.num_features), dtype=np.float64)
    for i in range(ds.num_instances):
        ids, vals = ds.instance_features(i)
        for l in ds.labels_of(i):
            feats[l, ids] += vals
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    np.divide(feats, norms, out=feats, where=norms > 0)
    return feats


def _spherical_2means(rows: np.ndarray, rng: np.random.Generator,
                      max_iter: int = 50) -> np.ndarray:
    """Similarity difference (to centroid 0 minus to centroid 1) per row."""
    n = len(rows)
    picks = rng.choice(n, size=2, replace=False)
    cents = rows[picks].copy()
    assign = np.zeros(n, dtype=np.int8)
    for _ in range(max_iter):
        sims = rows @ cents.T
        diff = sims[:, 0] - sims[:, 1]
        new_assign = (diff < 0).astype(np.int8)
        for side in (0, 1):
            members = rows[new_assign == side]
            if len(members) == 0:
                cents[side] = rows[rng.integers(n)]
                continue
            c = members.mean(axis=0)
            norm = np.linalg.norm(c)
            cents[side] = c / norm if norm > 0 else c
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    sims = rows @ cents.T
    return sims[:, 0] - sims[:, 1]


def balanced_kmeans(features: np.ndarray, num_clusters: int,
                    seed: int) -> LabelClustering:
    """Recursive balanced bisection of the label set.

    Each node runs spherical 2-means to convergence, then splits at the
    median of the similarity difference so the halves differ by at most
    one label; recursion depth is log2(num_clusters).
    """
    num_labels = len(features)
    if num_clusters < 1 or (num_clusters & (num_clusters - 1)) != 0:
        raise ConfigError(f"num_clusters must be a power of 2, got {num_clusters}")
    if num_clusters > num_labels:
        raise ConfigError(f"num_clusters {num_clusters} exceeds label count "
                          f"{num_labels}")
    rng = np.random.default_rng(seed)
    assignment = np.zeros(num_labels, dtype=np.int32)
    next_cluster = 0

    def recurse(label_ids: np.ndarray, splits_left: int) -> None:
        nonlocal next_cluster
        if splits_left == 0:
            assignment[label_ids] = next_cluster
            next_cluster += 1
            return
        diff = _spherical_2means(features[label_ids], rng)
        order = np.argsort(-diff, kind="stable")
        half = (len(label_ids) + 1) // 2
        recurse(label_ids[order[:half]], splits_left - 1)
        recurse(label_ids[order[half:]], splits_left - 1)

    recurse(np.arange(num_labels), int(np.log2(num_clusters)))
    out = LabelClustering(num_clusters, assignment)
    out.validate()
    return out


def random_clustering(num_labels: int, num_clusters: int,
                      seed: int) -> LabelClustering:
    """Uniformly random balanced partition: shuffle, chunk into K parts."""
    if num_clusters > num_labels or num_clusters < 1:
        raise ConfigError(f"need 1 <= K <= L, got K={num_clusters} L={num_labels}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(num_labels)
    assignment = np.zeros(num_labels, dtype=np.int32)
    base, rem = divmod(num_labels, num_clusters)
    start = 0
    for c in range(num_clusters):
        size = base + (1 if c < rem else 0)
        assignment[perm[start:start + size]] = c
        start += size
    out = LabelClustering(num_clusters, assignment)
    out.validate()
    return out


def meta_targets(positive_labels: np.ndarray,
                 clustering: LabelClustering) -> np.ndarray:
    """Sorted unique cluster ids touched by the given label set."""
    pos = np.asarray(positive_labels, dtype=np.int64)
    if len(pos) and (pos.min() < 0 or pos.max() >= clustering.num_labels):
        raise ShapeError("label id outside clustering range")
    return np.unique(clustering.assignment[pos])


def cluster_overlap(a: LabelClustering, b: LabelClustering) -> float:
    """Max pairwise intersection size relative to the largest cluster."""
    if a.num_labels != b.num_labels or a.num_clusters != b.num_clusters:
        raise ShapeError("clusterings disagree on L or K")
    counts = np.zeros((a.num_clusters, b.num_clusters), dtype=np.int64)
    np.add.at(counts, (a.assignment, b.assignment), 1)
    max_size = max(int(a.sizes().max()), int(b.sizes().max()))
    return float(counts.max()) / max_size


def write_clustering(clustering: LabelClustering, stream: IO[str]) -> None:
    """One 'label_id cluster_id' line per label."""
    for l, c in enumerate(clustering.assignment):
        stream.write(f"{l} {int(c)}\n")


def read_clustering(stream: IO[str]) -> LabelClustering:
    pairs = []
    for line in stream:
        if not line.strip():
            continue
        l, c = line.split()
        pairs.append((int(l), int(c)))
    if not pairs:
        raise ConfigError("empty clustering file")
    assignment = np.zeros(len(pairs), dtype=np.int32)
    seen = np.zeros(len(pairs), dtype=bool)
    for l, c in pairs:
        if not 0 <= l < len(pairs) or seen[l]:
            raise ConfigError(f"bad or duplicate label id {l}")
        seen[l] = True
        assignment[l] = c
    return LabelClustering(int(assignment.max()) + 1, assignment)


def save_clustering(clustering: LabelClustering, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        write_clustering(clustering, fh)


def load_clustering(path: str | Path) -> LabelClustering:
    with open(path, "r", encoding="utf-8") as fh:
        return read_clustering(fh)
