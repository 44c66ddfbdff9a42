"""Ranking metrics for very large label spaces.

All top-k selections are deterministic: sorted by score descending with
ties broken by lowest label id.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ShapeError


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k highest scores, ties broken by lowest label id."""
    scores = np.asarray(scores)
    if scores.ndim != 1:
        raise ShapeError(f"expected a score vector, got shape {scores.shape}")
    if not 1 <= k <= len(scores):
        raise ShapeError(f"k={k} outside [1, {len(scores)}]")
    # Stable sort of -scores keeps ascending id order within ties.
    return np.argsort(-scores, kind="stable")[:k]


def rank_batch(scores: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top_k for a (B, L) score matrix, returns (B, k) ids."""
    scores = np.asarray(scores)
    if scores.ndim != 2:
        raise ShapeError(f"expected a score matrix, got shape {scores.shape}")
    if not 1 <= k <= scores.shape[1]:
        raise ShapeError(f"k={k} outside [1, {scores.shape[1]}]")
    return np.argsort(-scores, axis=1, kind="stable")[:, :k]


def _hits(true_labels: Sequence[np.ndarray], rankings: np.ndarray,
          k: int) -> np.ndarray:
    if rankings.shape[1] < k:
        raise ShapeError(f"rankings provide {rankings.shape[1]} ids, need k={k}")
    if len(true_labels) != rankings.shape[0]:
        raise ShapeError("true_labels and rankings disagree on sample count")
    hits = np.zeros(len(true_labels), dtype=np.int64)
    for i, pos in enumerate(true_labels):
        hits[i] = np.isin(rankings[i, :k], pos).sum()
    return hits


def precision_at_k(true_labels: Sequence[np.ndarray], rankings: np.ndarray,
                   k: int) -> float:
    """Mean over samples of |top_k ∩ P| / k."""
    hits = _hits(true_labels, rankings, k)
    return float(hits.mean() / k) if len(hits) else 0.0


def psp_at_k(true_labels: Sequence[np.ndarray], rankings: np.ndarray,
             propensities: np.ndarray, k: int) -> float:
    """Propensity-scored precision: hits weighted by 1/p_l.

    Tail labels have small p_l, so a correct tail prediction counts for
    more than a correct head prediction.
    """
    p = np.asarray(propensities, dtype=np.float64)
    if np.any(p <= 0):
        raise ValueError("propensities must be in (0, 1]")
    if rankings.shape[1] < k:
        raise ShapeError(f"rankings provide {rankings.shape[1]} ids, need k={k}")
    total = 0.0
    for i, pos in enumerate(true_labels):
        top = rankings[i, :k]
        hit = np.isin(top, pos)
        total += float((hit / p[top]).sum()) / k
    n = len(true_labels)
    return total / n if n else 0.0


def macro_p_at_k(true_labels: Sequence[np.ndarray], rankings: np.ndarray,
                 k: int, num_labels: int,
                 instance_normalized: bool = False) -> float:
    """Per-ranking precision summed over instances, normalized by 1/L.

    The default normalizer is the label count L; passing
    ``instance_normalized=True`` divides by the instance count instead.
    """
    hits = _hits(true_labels, rankings, k)
    denom = min(k, rankings.shape[1])
    total = float((hits / denom).sum())
    norm = len(true_labels) if instance_normalized else num_labels
    return total / norm if norm else 0.0


def metrics_from_rankings(true_labels: Sequence[np.ndarray],
                          rankings: np.ndarray,
                          propensities: np.ndarray | None, ks: Sequence[int],
                          num_labels: int) -> dict[str, float]:
    """P@k, PSP@k and Macro-P@k for each k, as a flat name -> value dict."""
    out: dict[str, float] = {}
    for k in ks:
        out[f"P@{k}"] = precision_at_k(true_labels, rankings, k)
        if propensities is not None:
            out[f"PSP@{k}"] = psp_at_k(true_labels, rankings, propensities, k)
        out[f"MacroP@{k}"] = macro_p_at_k(true_labels, rankings, k, num_labels)
    return out


def metrics_report(true_labels: Sequence[np.ndarray], scores: np.ndarray,
                   propensities: np.ndarray | None, ks: Sequence[int],
                   num_labels: int) -> dict[str, float]:
    """Rank the full score matrix, then compute all metrics."""
    rankings = rank_batch(scores, max(ks))
    return metrics_from_rankings(true_labels, rankings, propensities, ks,
                                 num_labels)
