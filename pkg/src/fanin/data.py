"""Multi-label dataset ingestion, statistics, propensities, synthetic data.

Datasets use the plain-text sparse format of the public extreme
classification repositories:

    N d_in L
    l1,l2,...,lk f1:v1 f2:v2 ...

One instance per line after the header; the label list may be empty, in
which case the line starts with a space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from io import StringIO
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ParseError, RangeError


@dataclass(frozen=True)
class Dataset:
    """Immutable sparse multi-label dataset in CSR-style arrays.

    ``feat_*`` arrays hold per-instance (feature_id, value) pairs sorted by
    feature id; ``label_*`` arrays hold per-instance sorted unique label ids.
    """

    num_features: int
    num_labels: int
    feat_indptr: np.ndarray
    feat_ids: np.ndarray
    feat_vals: np.ndarray
    label_indptr: np.ndarray
    label_ids: np.ndarray

    def __post_init__(self):
        for arr in (self.feat_indptr, self.feat_ids, self.feat_vals,
                    self.label_indptr, self.label_ids):
            arr.flags.writeable = False

    @property
    def num_instances(self) -> int:
        return len(self.feat_indptr) - 1

    def instance_features(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        s, e = self.feat_indptr[i], self.feat_indptr[i + 1]
        return self.feat_ids[s:e], self.feat_vals[s:e]

    def labels_of(self, i: int) -> np.ndarray:
        s, e = self.label_indptr[i], self.label_indptr[i + 1]
        return self.label_ids[s:e]

    def label_sets(self) -> list[np.ndarray]:
        return [self.labels_of(i) for i in range(self.num_instances)]

    def dense_batch(self, rows: Sequence[int], dtype=np.float32) -> np.ndarray:
        """Densify the given instance rows into a (len(rows), d_in) matrix."""
        out = np.zeros((len(rows), self.num_features), dtype=dtype)
        for k, r in enumerate(rows):
            ids, vals = self.instance_features(r)
            out[k, ids] = vals
        return out

    def label_counts(self) -> np.ndarray:
        """n_l = number of instances having label l, length L."""
        return np.bincount(self.label_ids, minlength=self.num_labels).astype(np.int64)


@dataclass(frozen=True)
class DatasetStats:
    """Header counts plus the two per-dataset averages."""

    num_instances: int
    num_labels: int
    avg_labels_per_instance: float
    avg_instances_per_label: float


@dataclass(frozen=True)
class PropensityModel:
    """Per-label observation propensities p_l in (0, 1]."""

    a: float
    b: float
    values: np.ndarray

    def __post_init__(self):
        self.values.flags.writeable = False


def _build_dataset(num_features: int, num_labels: int,
                   feats: list[tuple[np.ndarray, np.ndarray]],
                   labels: list[np.ndarray]) -> Dataset:
    feat_indptr = np.zeros(len(feats) + 1, dtype=np.int64)
    feat_indptr[1:] = np.cumsum([len(ids) for ids, _ in feats])
    label_indptr = np.zeros(len(labels) + 1, dtype=np.int64)
    label_indptr[1:] = np.cumsum([len(p) for p in labels])
    return Dataset(
        num_features=num_features,
        num_labels=num_labels,
        feat_indptr=feat_indptr,
        feat_ids=np.concatenate([ids for ids, _ in feats]) if feats
        else np.zeros(0, dtype=np.int32),
        feat_vals=np.concatenate([v for _, v in feats]) if feats
        else np.zeros(0, dtype=np.float32),
        label_indptr=label_indptr,
        label_ids=np.concatenate(labels) if labels else np.zeros(0, dtype=np.int32),
    )


def _canonical_row(ids: list[int], vals: list[float],
                   d_in: int, lineno: int) -> tuple[np.ndarray, np.ndarray]:
    """Sort by feature id, summing duplicate ids into one entry."""
    ids_arr = np.asarray(ids, dtype=np.int64)
    if len(ids_arr) and (ids_arr.min() < 0 or ids_arr.max() >= d_in):
        bad = ids_arr[(ids_arr < 0) | (ids_arr >= d_in)][0]
        raise RangeError(f"line {lineno}: feature id {bad} outside [0, {d_in})")
    vals_arr = np.asarray(vals, dtype=np.float32)
    order = np.argsort(ids_arr, kind="stable")
    ids_arr, vals_arr = ids_arr[order], vals_arr[order]
    uniq, start = np.unique(ids_arr, return_index=True)
    if len(uniq) != len(ids_arr):
        summed = np.add.reduceat(vals_arr.astype(np.float64), start)
        vals_arr = summed.astype(np.float32)
        ids_arr = uniq
    return ids_arr.astype(np.int32), vals_arr


def parse_xmc_file(stream: IO[str] | Iterable[str]) -> Dataset:
    """Parse the repository text format into a Dataset.

    Raises ParseError/RangeError with 1-based line numbers on malformed
    input, out-of-range ids, or non-finite feature values.
    """
    lines = iter(stream)
    try:
        header = next(lines)
    except StopIteration:
        raise ParseError("empty file, expected 'N d_in L' header", 1) from None
    parts = header.split()
    if len(parts) != 3:
        raise ParseError(f"expected 'N d_in L' header, got {header.strip()!r}", 1)
    try:
        n, d_in, num_labels = (int(p) for p in parts)
    except ValueError:
        raise ParseError(f"non-integer header field in {header.strip()!r}", 1) from None
    if n < 0 or d_in < 0 or num_labels < 0:
        raise ParseError("negative header field", 1)

    feats: list[tuple[np.ndarray, np.ndarray]] = []
    labels: list[np.ndarray] = []
    for lineno, raw in enumerate(lines, start=2):
        row = raw.rstrip("\r\n")
        if len(feats) == n:
            if row.strip():
                raise ParseError(f"expected {n} instance rows, found more", lineno)
            continue
        if row and row[0] not in " \t":
            head, _, rest = row.partition(" ")
            tokens = rest.split()
            try:
                lab = sorted({int(t) for t in head.split(",")})
            except ValueError:
                raise ParseError(f"bad label list {head!r}", lineno) from None
        else:
            tokens = row.split()
            lab = []
        lab_arr = np.asarray(lab, dtype=np.int64)
        if len(lab_arr) and (lab_arr[0] < 0 or lab_arr[-1] >= num_labels):
            bad = lab_arr[0] if lab_arr[0] < 0 else lab_arr[-1]
            raise RangeError(f"line {lineno}: label {bad} outside [0, {num_labels})")
        ids: list[int] = []
        vals: list[float] = []
        for tok in tokens:
            fid, colon, sval = tok.partition(":")
            if not colon:
                raise ParseError(f"bad feature token {tok!r}", lineno)
            try:
                f = int(fid)
                v = float(sval)
            except ValueError:
                raise ParseError(f"bad feature token {tok!r}", lineno) from None
            if not math.isfinite(v):
                raise ParseError(f"non-finite feature value in {tok!r}", lineno)
            ids.append(f)
            vals.append(v)
        feats.append(_canonical_row(ids, vals, d_in, lineno))
        labels.append(lab_arr.astype(np.int32))
    if len(feats) != n:
        raise ParseError(f"expected {n} instance rows, found {len(feats)}",
                         len(feats) + 2)
    return _build_dataset(d_in, num_labels, feats, labels)


def load_xmc_file(path: str | Path) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_xmc_file(fh)


def serialize_xmc(ds: Dataset, stream: IO[str]) -> None:
    """Write in the same text format; parse(serialize(ds)) reproduces ds."""
    stream.write(f"{ds.num_instances} {ds.num_features} {ds.num_labels}\n")
    for i in range(ds.num_instances):
        lab = ",".join(str(l) for l in ds.labels_of(i))
        ids, vals = ds.instance_features(i)
        toks = " ".join(f"{f}:{v:.9g}" for f, v in zip(ids, vals))
        if lab:
            stream.write(f"{lab} {toks}\n" if toks else f"{lab}\n")
        else:
            stream.write(f" {toks}\n")


def save_xmc_file(ds: Dataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        serialize_xmc(ds, fh)


def dumps_xmc(ds: Dataset) -> str:
    buf = StringIO()
    serialize_xmc(ds, buf)
    return buf.getvalue()


def compute_stats(ds: Dataset) -> DatasetStats:
    """Average labels per instance and average instances per label."""
    total = int(ds.label_indptr[-1])
    n, l = ds.num_instances, ds.num_labels
    return DatasetStats(
        num_instances=n,
        num_labels=l,
        avg_labels_per_instance=total / n if n else 0.0,
        avg_instances_per_label=total / l if l else 0.0,
    )


def compute_propensities(label_counts: np.ndarray, num_instances: int,
                         a: float = 0.55, b: float = 1.5) -> PropensityModel:
    """Inverse-propensity model p_l = 1 / (1 + C (n_l + b)^-a).

    C = (ln N - 1) (b + 1)^a, so p is increasing in the label count n_l
    and tends to 1 for head labels.
    """
    if a <= 0 or b < 0:
        raise ConfigError(f"propensity requires a > 0 and b >= 0, got a={a} b={b}")
    if num_instances < 1 or math.log(num_instances) <= 1.0:
        raise ConfigError(
            f"propensity model needs ln(N) > 1, got N={num_instances}")
    counts = np.asarray(label_counts, dtype=np.float64)
    if counts.min(initial=0) < 0:
        raise ConfigError("negative label count")
    c = (math.log(num_instances) - 1.0) * (b + 1.0) ** a
    values = 1.0 / (1.0 + c * (counts + b) ** (-a))
    return PropensityModel(a=a, b=b, values=values)


def generate_synthetic(num_instances: int, num_labels: int, num_features: int,
                       zipf_exponent: float, labels_per_instance: int,
                       seed: int, center_nnz: int = 16,
                       noise: float = 0.3) -> Dataset:
    """Long-tailed synthetic dataset with learnable label structure.

    Label frequencies follow a Zipf law with the given exponent (label 0 is
    the head). Each label owns a sparse latent center vector; an instance's
    features are the noisy sum of the centers of its labels, so a linear
    classifier over the features can recover the labels. Deterministic
    under ``seed``.
    """
    if min(num_instances, num_labels, num_features, labels_per_instance) < 1:
        raise ConfigError("all synthetic counts must be >= 1")
    if zipf_exponent <= 0:
        raise ConfigError(f"zipf_exponent must be > 0, got {zipf_exponent}")
    if labels_per_instance > num_labels:
        raise ConfigError("labels_per_instance cannot exceed num_labels")

    rng = np.random.default_rng(seed)
    k = labels_per_instance
    cn = min(center_nnz, num_features)

    # Latent sparse centers, one per label.
    center_ids = np.empty((num_labels, cn), dtype=np.int64)
    for l in range(num_labels):
        center_ids[l] = rng.choice(num_features, size=cn, replace=False)
    center_vals = rng.normal(0.0, 1.0, size=(num_labels, cn))
    center_vals /= np.linalg.norm(center_vals, axis=1, keepdims=True)

    log_w = -zipf_exponent * np.log(np.arange(1, num_labels + 1, dtype=np.float64))

    feats: list[tuple[np.ndarray, np.ndarray]] = []
    labels: list[np.ndarray] = []
    for _ in range(num_instances):
        # Gumbel top-k draws k distinct labels with probability ~ Zipf weights.
        g = log_w + rng.gumbel(size=num_labels)
        chosen = np.sort(np.argpartition(g, -k)[-k:] if k < num_labels
                         else np.arange(num_labels))
        ids = center_ids[chosen].ravel()
        vals = center_vals[chosen].ravel()
        uniq, inv = np.unique(ids, return_inverse=True)
        summed = np.zeros(len(uniq))
        np.add.at(summed, inv, vals)
        summed += noise * rng.normal(size=len(uniq))
        feats.append((uniq.astype(np.int32), summed.astype(np.float32)))
        labels.append(chosen.astype(np.int32))
    return _build_dataset(num_features, num_labels, feats, labels)
