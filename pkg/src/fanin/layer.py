"""Fixed fan-in sparse layer: storage format, kernels, accounting.

Every output row owns exactly ``fan_in`` weights stored as a dense
(rows, fan_in) value array plus a congruent column-index array — the
padding-free ELLPACK layout. Column indices are strictly increasing
within each row (16-bit when the input dimension fits, 32-bit
otherwise).

Kernel backend: the compiled extension is used when importable, with a
NumPy fallback otherwise. Set FANIN_KERNELS=python|cython to force one.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO

import numpy as np

from . import _kernels_py
from .errors import ConfigError, ShapeError

_choice = os.environ.get("FANIN_KERNELS", "auto")
if _choice not in ("auto", "cython", "python"):
    raise ConfigError(f"FANIN_KERNELS must be auto|cython|python, got {_choice!r}")
if _choice in ("auto", "cython"):
    try:
        from . import _kernels as _K
        KERNEL_BACKEND = "cython"
    except ImportError:
        if _choice == "cython":
            raise
        _K = _kernels_py
        KERNEL_BACKEND = "python"
else:
    _K = _kernels_py
    KERNEL_BACKEND = "python"


def index_dtype(num_cols: int) -> np.dtype:
    """16-bit ids when every column index fits, 32-bit otherwise."""
    return np.dtype(np.uint16) if num_cols <= 65536 else np.dtype(np.uint32)


@dataclass
class FixedFanInLayer:
    """The sparse one-vs-all weight matrix with a fixed per-row fan-in."""

    weights: np.ndarray
    indices: np.ndarray
    num_cols: int

    @property
    def rows(self) -> int:
        return self.weights.shape[0]

    @property
    def fan_in(self) -> int:
        return self.weights.shape[1]

    @property
    def dtype(self) -> np.dtype:
        return self.weights.dtype

    def sparsity(self) -> float:
        return sparsity_of(self.fan_in, self.num_cols)

    def validate(self) -> None:
        """Check all structural invariants; raises ShapeError on violation."""
        if self.weights.shape != self.indices.shape:
            raise ShapeError("weights/indices shape mismatch")
        if not 1 <= self.fan_in <= self.num_cols:
            raise ShapeError(f"fan_in {self.fan_in} outside [1, {self.num_cols}]")
        if self.indices.dtype != index_dtype(self.num_cols):
            raise ShapeError(f"index dtype {self.indices.dtype} wrong for "
                             f"num_cols={self.num_cols}")
        idx = self.indices.astype(np.int64)
        if idx.min(initial=0) < 0 or idx.max(initial=-1) >= self.num_cols:
            raise ShapeError("column index out of range")
        if self.fan_in > 1 and not (np.diff(idx, axis=1) > 0).all():
            raise ShapeError("row indices not strictly increasing")
        if not np.isfinite(self.weights).all():
            raise ShapeError("non-finite weight")

    def copy(self) -> "FixedFanInLayer":
        return FixedFanInLayer(self.weights.copy(), self.indices.copy(),
                               self.num_cols)

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.rows, self.num_cols), dtype=self.dtype)
        np.put_along_axis(dense, self.indices.astype(np.int64), self.weights,
                          axis=1)
        return dense

    def astype(self, dtype) -> "FixedFanInLayer":
        return FixedFanInLayer(self.weights.astype(dtype), self.indices.copy(),
                               self.num_cols)


def random_layer(rows: int, num_cols: int, fan_in: int, rng: np.random.Generator,
                 dtype=np.float32, scale: float | None = None) -> FixedFanInLayer:
    """Random topology (distinct sorted columns per row), uniform weights.

    Default weight scale is 1/sqrt(fan_in), the usual dense-layer init
    applied to the actual fan-in.
    """
    if not 1 <= fan_in <= num_cols:
        raise ConfigError(f"fan_in {fan_in} outside [1, {num_cols}]")
    idx = np.empty((rows, fan_in), dtype=index_dtype(num_cols))
    for l in range(rows):
        idx[l] = np.sort(rng.choice(num_cols, size=fan_in, replace=False))
    bound = scale if scale is not None else 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(rows, fan_in)).astype(dtype)
    return FixedFanInLayer(w, idx, num_cols)


def from_dense(dense: np.ndarray, fan_in: int) -> FixedFanInLayer:
    """Keep the fan_in largest-|w| entries per row, ties to lowest column."""
    dense = np.asarray(dense)
    rows, num_cols = dense.shape
    if not 1 <= fan_in <= num_cols:
        raise ConfigError(f"fan_in {fan_in} outside [1, {num_cols}]")
    # Stable sort on -|w| resolves magnitude ties toward lower columns.
    order = np.argsort(-np.abs(dense), axis=1, kind="stable")[:, :fan_in]
    cols = np.sort(order, axis=1)
    vals = np.take_along_axis(dense, cols, axis=1)
    return FixedFanInLayer(vals.astype(dense.dtype),
                           cols.astype(index_dtype(num_cols)), num_cols)


@dataclass
class SparseDelta:
    """Sparse backpropagated loss derivative, CSR over the batch.

    Labels are sorted ascending within each sample; exact zeros are
    omitted.
    """

    indptr: np.ndarray
    labels: np.ndarray
    values: np.ndarray
    num_labels: int

    @property
    def num_samples(self) -> int:
        return len(self.indptr) - 1

    @property
    def nnz(self) -> int:
        return len(self.labels)

    @classmethod
    def from_dense(cls, dense: np.ndarray, num_labels: int | None = None,
                   drop_below: float | None = None) -> "SparseDelta":
        """Sparsify a (B, L) derivative; drops exact zeros, or magnitudes
        below ``drop_below`` when given."""
        dense = np.asarray(dense)
        if dense.ndim != 2:
            raise ShapeError(f"expected (B, L) delta, got {dense.shape}")
        if drop_below is None:
            mask = dense != 0
        else:
            mask = np.abs(dense) >= drop_below
        samples, labels = np.nonzero(mask)
        indptr = np.zeros(dense.shape[0] + 1, dtype=np.int64)
        np.add.at(indptr, samples + 1, 1)
        indptr = np.cumsum(indptr)
        return cls(indptr=indptr, labels=labels.astype(np.int64),
                   values=dense[samples, labels],
                   num_labels=num_labels or dense.shape[1])

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.num_samples, self.num_labels),
                       dtype=self.values.dtype)
        samples = np.repeat(np.arange(self.num_samples), np.diff(self.indptr))
        out[samples, self.labels] = self.values
        return out


@dataclass
class KernelCounters:
    """Optional instrumentation filled by the backward kernels."""

    touches: int = 0


def _check_x(layer: FixedFanInLayer, x: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=layer.dtype)
    if x.ndim != 2 or x.shape[1] != layer.num_cols:
        raise ShapeError(f"input shape {x.shape} incompatible with "
                         f"num_cols={layer.num_cols}")
    return x


def _check_delta(layer: FixedFanInLayer, delta: SparseDelta) -> np.ndarray:
    if delta.nnz and int(delta.labels.max()) >= layer.rows:
        raise ShapeError("delta label outside layer rows")
    return np.ascontiguousarray(delta.values, dtype=layer.dtype)


def ffi_forward(layer: FixedFanInLayer, x: np.ndarray) -> np.ndarray:
    """Score batch x against every row: (B, d) -> (B, L)."""
    x = _check_x(layer, x)
    return _K.forward(layer.weights, layer.indices, x)


def ffi_backward_weights(layer: FixedFanInLayer, x: np.ndarray,
                         delta: SparseDelta,
                         counters: KernelCounters | None = None) -> np.ndarray:
    """Gradient wrt weights in the layer's index layout; cost nnz * fan_in."""
    x = _check_x(layer, x)
    if delta.num_samples != x.shape[0]:
        raise ShapeError("delta batch size does not match x")
    vals = _check_delta(layer, delta)
    grad, touches = _K.backward_weights(layer.indices, x, delta.indptr,
                                        delta.labels, vals)
    if counters is not None:
        counters.touches = int(touches)
    return grad


def ffi_backward_input(layer: FixedFanInLayer, delta: SparseDelta,
                       batch: int,
                       counters: KernelCounters | None = None) -> np.ndarray:
    """Gradient wrt the input batch via scatter-add over delta entries."""
    if delta.num_samples != batch:
        raise ShapeError("delta batch size does not match requested batch")
    vals = _check_delta(layer, delta)
    xg, touches = _K.backward_input(layer.weights, layer.indices, delta.indptr,
                                    delta.labels, vals, batch, layer.num_cols)
    if counters is not None:
        counters.touches = int(touches)
    return xg


def sparsity_of(fan_in: int, num_cols: int) -> float:
    """Fraction of absent connections, 1 - F/d."""
    if not 1 <= fan_in <= num_cols:
        raise ConfigError(f"fan_in {fan_in} outside [1, {num_cols}]")
    return 1.0 - fan_in / num_cols

def memory_overhead(weight_bits: int, index_bits: int,
                    shared_index_buffers: int = 0) -> float:
    """Relative storage overhead of the index array.

    ``shared_index_buffers`` counts additional same-shape value arrays
    (gradient plus two momentum terms = 3) that reuse the one index
    array, amortizing its cost.
    """
    if weight_bits <= 0 or index_bits <= 0:
        raise ConfigError("bit widths must be positive")
    if shared_index_buffers < 0:
        raise ConfigError("shared_index_buffers must be >= 0")
    return index_bits / (weight_bits * (1 + shared_index_buffers))


def head_memory_bytes(num_cols: int, rows: int, fan_in: int,
                      weight_bits: int = 32,
                      index_bits: int | None = None) -> dict[str, float]:
    """Training-time byte accounting for dense vs fixed fan-in heads.

    Both sides count weights + gradient + two momentum terms; the sparse
    side adds the single shared index array.
    """
    if index_bits is None:
        index_bits = 16 if num_cols <= 65536 else 32
    wb = weight_bits // 8
    ib = index_bits / 8
    dense = 4 * rows * num_cols * wb
    sparse = 4 * rows * fan_in * wb + rows * fan_in * ib
    return {
        "dense_bytes": float(dense),
        "sparse_bytes": float(sparse),
        "ratio": sparse / dense,
    }


_LAYER_MAGIC = "ffi-layer"
_LAYER_VERSION = 1


def write_layer(layer: FixedFanInLayer, stream: IO[str]) -> None:
    """Versioned text dump: magic/version/dtype line, 'L d F' line, then
    one 'idx:weight' pair list per row."""
    fmt = "%.9g" if layer.dtype == np.float32 else "%.17g"
    stream.write(f"{_LAYER_MAGIC} {_LAYER_VERSION} {layer.dtype.name}\n")
    stream.write(f"{layer.rows} {layer.num_cols} {layer.fan_in}\n")
    for l in range(layer.rows):
        pairs = " ".join(f"{int(c)}:{fmt % w}"
                         for c, w in zip(layer.indices[l], layer.weights[l]))
        stream.write(pairs + "\n")


def read_layer(stream: IO[str]) -> FixedFanInLayer:
    head = stream.readline().split()
    if len(head) != 3 or head[0] != _LAYER_MAGIC or int(head[1]) != _LAYER_VERSION:
        raise ConfigError(f"unrecognized layer dump header {head!r}")
    dtype = np.dtype(head[2])
    rows, num_cols, fan_in = (int(t) for t in stream.readline().split())
    w = np.empty((rows, fan_in), dtype=dtype)
    idx = np.empty((rows, fan_in), dtype=index_dtype(num_cols))
    for l in range(rows):
        toks = stream.readline().split()
        if len(toks) != fan_in:
            raise ConfigError(f"row {l}: expected {fan_in} pairs, got {len(toks)}")
        for j, tok in enumerate(toks):
            c, _, v = tok.partition(":")
            idx[l, j] = int(c)
            w[l, j] = dtype.type(v)
    layer = FixedFanInLayer(w, idx, num_cols)
    layer.validate()
    return layer


def save_layer(layer: FixedFanInLayer, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        write_layer(layer, fh)


def load_layer(path: str | Path) -> FixedFanInLayer:
    with open(path, "r", encoding="utf-8") as fh:
        return read_layer(fh)
