"""Prune/regrow engine: magnitude pruning with random zero-init regrowth.

Pruning is per row; a global prune would break the fixed fan-in
constraint. Regrown weights and their optimizer moments start at zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .layer import FixedFanInLayer

PRUNE_MODES = ("fraction", "threshold")


@dataclass
class RewireConfig:
    """When and how much to rewire."""

    mode: str = "fraction"
    rewire_fraction: float | None = None
    rewire_threshold: float | None = None
    interval: int = 100
    stop_fraction: float = 0.66

    def validate(self) -> None:
        if self.mode not in PRUNE_MODES:
            raise ConfigError(f"prune mode must be one of {PRUNE_MODES}, "
                              f"got {self.mode!r}")
        if self.mode == "fraction":
            if self.rewire_fraction is None:
                raise ConfigError("fraction mode requires rewire_fraction")
            if not 0 <= self.rewire_fraction < 1:
                raise ConfigError("rewire_fraction must be in [0, 1); 1 would "
                                  "empty rows")
        else:
            if self.rewire_threshold is None:
                raise ConfigError("threshold mode requires rewire_threshold")
            if self.rewire_threshold < 0:
                raise ConfigError("rewire_threshold must be >= 0")
        if self.interval < 1:
            raise ConfigError("rewire interval must be >= 1")
        if not 0 < self.stop_fraction <= 1:
            raise ConfigError("stop_fraction must be in (0, 1]")


@dataclass
class RewireStats:
    """Outcome of one prune/regrow event; pruned always equals regrown."""

    step: int
    pruned: int
    regrown: int
    min_surviving_magnitude: float
    per_row_pruned: np.ndarray = field(repr=False)


def should_rewire(step: int, total_steps: int, cfg: RewireConfig) -> bool:
    """True on multiples of the interval, up to the stop fraction of the run."""
    if step < 0:
        raise ConfigError(f"negative step {step}")
    return (step > 0 and step % cfg.interval == 0
            and step <= cfg.stop_fraction * total_steps)


def _prune_slots(weights_row: np.ndarray, cfg: RewireConfig) -> np.ndarray:
    """Slot positions to prune, smallest |w| first, ties to lowest column.

    The caller passes weights in index order, so position order is column
    order.
    """
    mag = np.abs(weights_row)
    order = np.lexsort((np.arange(len(mag)), mag))
    if cfg.mode == "fraction":
        k = int(len(mag) * cfg.rewire_fraction)
        return order[:k]
    below = order[mag[order] < cfg.rewire_threshold]
    return below[: len(mag) - 1]


def prune_regrow(layer: FixedFanInLayer, moments: Sequence[np.ndarray],
                 cfg: RewireConfig, rng: np.random.Generator,
                 step: int = 0) -> RewireStats:
    """Rewire the layer in place, remapping moment arrays in lockstep.

    Per row: prune per the config mode, then draw the same number of fresh
    columns uniformly from the row's currently inactive columns. Fresh
    weights and moments are zero; indices stay strictly sorted; fan-in is
    preserved exactly.
    """
    cfg.validate()
    if cfg.mode == "fraction" and cfg.rewire_fraction >= 1:
        raise ConfigError("rewire_fraction=1 would empty rows")
    rows, fan_in = layer.rows, layer.fan_in
    for m in moments:
        if m.shape != layer.weights.shape:
            raise ConfigError("moment array not congruent to layer weights")
    per_row = np.zeros(rows, dtype=np.int64)
    min_surv = np.inf
    if layer.num_cols == fan_in:
        # No inactive columns to grow into.
        return RewireStats(step, 0, 0, float(np.abs(layer.weights).min()),
                           per_row)

    all_cols = np.arange(layer.num_cols, dtype=np.int64)
    # Regrowth is without replacement from the row's inactive columns, so
    # at most num_cols - fan_in entries can turn over per event.
    cap = layer.num_cols - fan_in
    for l in range(rows):
        w = layer.weights[l]
        pruned = _prune_slots(w, cfg)[:cap]
        k = len(pruned)
        per_row[l] = k
        if k == 0:
            if fan_in:
                min_surv = min(min_surv, float(np.abs(w).min()))
            continue
        keep = np.ones(fan_in, dtype=bool)
        keep[pruned] = False
        surv_cols = layer.indices[l][keep].astype(np.int64)
        surv_w = w[keep]
        if len(surv_w):
            min_surv = min(min_surv, float(np.abs(surv_w).min()))
        inactive = np.setdiff1d(all_cols, layer.indices[l].astype(np.int64),
                                assume_unique=True)
        fresh = rng.choice(inactive, size=k, replace=False)
        cols = np.concatenate((surv_cols, fresh))
        order = np.argsort(cols)
        layer.indices[l] = cols[order].astype(layer.indices.dtype)
        new_w = np.concatenate((surv_w, np.zeros(k, dtype=w.dtype)))
        layer.weights[l] = new_w[order]
        for m in moments:
            new_m = np.concatenate((m[l][keep], np.zeros(k, dtype=m.dtype)))
            m[l] = new_m[order]
    total = int(per_row.sum())
    return RewireStats(step, total, total,
                       float(min_surv) if np.isfinite(min_surv) else 0.0,
                       per_row)


def rewire_stats_csv_header() -> str:
    return "step,pruned,regrown,min_surv_mag"


def rewire_stats_csv_row(stats: RewireStats) -> str:
    return (f"{stats.step},{stats.pruned},{stats.regrown},"
            f"{stats.min_surviving_magnitude:.9g}")
