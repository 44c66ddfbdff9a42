"""NumPy fallback kernels for the fixed fan-in layer.

Same call surface as the compiled extension in ``_kernels.pyx``. The
forward pass accumulates left-to-right over the fan-in slots, matching
the compiled kernel's accumulation order bit for bit. Backward touch
counts are derived from the sizes of the arrays actually processed.
"""

from __future__ import annotations

import numpy as np


def forward(weights: np.ndarray, indices: np.ndarray, x: np.ndarray) -> np.ndarray:
    batch = x.shape[0]
    rows, fan_in = weights.shape
    out = np.zeros((batch, rows), dtype=weights.dtype)
    for j in range(fan_in):
        out += x[:, indices[:, j]] * weights[:, j]
    return out


def backward_weights(indices: np.ndarray, x: np.ndarray, dptr: np.ndarray,
                     dlab: np.ndarray, dval: np.ndarray) -> tuple[np.ndarray, int]:
    rows, fan_in = indices.shape
    grad = np.zeros((rows, fan_in), dtype=x.dtype)
    nnz = len(dlab)
    if nnz == 0:
        return grad, 0
    samples = np.repeat(np.arange(len(dptr) - 1), np.diff(dptr))
    order = np.lexsort((samples, dlab))
    labs, smp, vals = dlab[order], samples[order], dval[order]
    touches = 0
    bounds = np.flatnonzero(np.diff(labs)) + 1
    starts = np.concatenate(([0], bounds))
    ends = np.concatenate((bounds, [nnz]))
    for s, e in zip(starts, ends):
        l = labs[s]
        gathered = x[smp[s:e]][:, indices[l]]
        grad[l] = vals[s:e] @ gathered
        touches += (e - s) * fan_in
    return grad, touches


def backward_input(weights: np.ndarray, indices: np.ndarray, dptr: np.ndarray,
                   dlab: np.ndarray, dval: np.ndarray, batch: int,
                   num_cols: int) -> tuple[np.ndarray, int]:
    if len(dlab) == 0:
        return np.zeros((batch, num_cols), dtype=weights.dtype), 0
    samples = np.repeat(np.arange(batch, dtype=np.int64), np.diff(dptr))
    cols = indices[dlab].astype(np.int64)
    vals = dval[:, None] * weights[dlab]
    flat = samples[:, None] * num_cols + cols
    acc = np.bincount(flat.ravel(), weights=vals.ravel().astype(np.float64),
                      minlength=batch * num_cols)
    return acc.reshape(batch, num_cols).astype(weights.dtype), vals.size
