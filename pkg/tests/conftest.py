"""Shared fixtures and independent oracles for the test suite.

Oracles deliberately avoid the code paths they check: dense scoring goes
through scatter-to-dense + BLAS matmul, gradients through central finite
differences, metrics through plain-Python enumeration.
"""

from __future__ import annotations

import numpy as np
import pytest

from fanin.data import Dataset, _build_dataset
from fanin.layer import FixedFanInLayer, SparseDelta, ffi_forward, random_layer


def dense_forward_oracle(layer: FixedFanInLayer, x: np.ndarray) -> np.ndarray:
    """Scatter the sparse layer to dense, then one dense matmul."""
    return x @ layer.to_dense().T


def dense_backward_weights_oracle(layer: FixedFanInLayer, x: np.ndarray,
                                  delta: SparseDelta) -> np.ndarray:
    """Dense weight gradient gathered back into the layer's index layout."""
    dense_grad = delta.to_dense().T @ x  # (L, d)
    return np.take_along_axis(dense_grad, layer.indices.astype(np.int64),
                              axis=1)


def dense_backward_input_oracle(layer: FixedFanInLayer,
                                delta: SparseDelta) -> np.ndarray:
    return delta.to_dense() @ layer.to_dense()


def central_difference(f, x: np.ndarray, step: float = 1e-5,
                       samples: int | None = None,
                       rng: np.random.Generator | None = None) -> np.ndarray:
    """Central finite differences of scalar f at x (flattened entries).

    When ``samples`` is given, only that many randomly chosen entries are
    probed; untouched entries come back as NaN.
    """
    flat = x.ravel()
    grad = np.full(flat.shape, np.nan)
    idx = np.arange(flat.size)
    if samples is not None and samples < flat.size:
        idx = (rng or np.random.default_rng(0)).choice(flat.size, samples,
                                                       replace=False)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        grad[i] = (hi - lo) / (2 * step)
    return grad.reshape(x.shape)


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-30)
    return float(np.abs(a - b).max() / scale)


def random_delta(rng: np.random.Generator, batch: int, num_labels: int,
                 density: float = 0.2, dtype=np.float32) -> SparseDelta:
    dense = rng.standard_normal((batch, num_labels)).astype(dtype)
    dense[rng.random((batch, num_labels)) >= density] = 0.0
    return SparseDelta.from_dense(dense, num_labels)


def make_dataset(feature_rows: list[dict[int, float]],
                 label_rows: list[list[int]], d_in: int, L: int) -> Dataset:
    feats = []
    for row in feature_rows:
        ids = np.array(sorted(row), dtype=np.int32)
        vals = np.array([row[i] for i in sorted(row)], dtype=np.float32)
        feats.append((ids, vals))
    labels = [np.array(sorted(set(r)), dtype=np.int32) for r in label_rows]
    return _build_dataset(d_in, L, feats, labels)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def small_layer(rng) -> FixedFanInLayer:
    return random_layer(20, 16, 4, rng, dtype=np.float32)
