"""End-to-end training: two optimizers, warmup+cosine schedule, rewiring,
auxiliary decay, per-step telemetry, and evaluation.

One logical thread owns all mutable state; runs are deterministic under
(config, seed, data).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Sequence

import numpy as np

from .clustering import LabelClustering, meta_targets
from .data import Dataset, PropensityModel
from .errors import ConfigError, FaninError
from .metrics import metrics_from_rankings, precision_at_k, rank_batch
from .model import (Model, ModelConfig, aux_scale, build_model, model_backward,
                    model_forward, total_loss)
from .optim import OptimState, lr_at, optimizer_step
from .rewire import (RewireConfig, RewireStats, prune_regrow,
                     rewire_stats_csv_header, rewire_stats_csv_row,
                     should_rewire)

PRECISIONS = {"float32": np.float32, "float64": np.float64}


@dataclass
class TrainConfig:
    """Everything a run needs besides the data and the clustering."""

    epochs: int = 20
    batch_size: int = 32
    lr_encoder: float = 1e-3
    lr_classifier: float = 1e-2
    lr_aux: float = 5.01e-4
    lr_intermediate: float = 2.01e-4
    warmup_steps: int = 100
    weight_decay_encoder: float = 0.01
    weight_decay_classifier: float = 1e-4
    optimizer_encoder: str = "adamw"
    optimizer_classifier: str = "adamw"
    dropout: float = 0.0
    seed: int = 0
    precision: str = "float32"
    rewire: RewireConfig = field(default_factory=lambda: RewireConfig(
        mode="fraction", rewire_fraction=0.25))
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        for name in ("lr_encoder", "lr_classifier", "lr_aux", "lr_intermediate"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {tuple(PRECISIONS)}")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")
        from .optim import OPTIM_KINDS
        for name in ("optimizer_encoder", "optimizer_classifier"):
            if getattr(self, name) not in OPTIM_KINDS:
                raise ConfigError(f"{name} must be one of {OPTIM_KINDS}")
        self.rewire.validate()
        self.model.validate()


TELEMETRY_HEADER = ("step,epoch,loss_extreme,loss_meta,aux_scale,"
                    "grad_norm_encoder,lr_enc,lr_clf")


@dataclass
class TelemetryRecord:
    step: int
    epoch: int
    loss_extreme: float
    loss_meta: float
    aux_scale: float
    grad_norm_encoder: float
    lr_enc: float
    lr_clf: float

    def csv_row(self) -> str:
        return (f"{self.step},{self.epoch},{self.loss_extreme!r},"
                f"{self.loss_meta!r},{self.aux_scale!r},"
                f"{self.grad_norm_encoder!r},{self.lr_enc!r},{self.lr_clf!r}")


@dataclass
class Telemetry:
    """Per-step records plus the rewire event stream.

    ``evals`` and ``aux_backward_steps`` are extra diagnostics; the CSV
    writers emit exactly the documented columns.
    """

    records: list[TelemetryRecord] = field(default_factory=list)
    rewires: list[RewireStats] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    aux_backward_steps: int = 0

    def write_csv(self, stream: IO[str]) -> None:
        stream.write(TELEMETRY_HEADER + "\n")
        for rec in self.records:
            stream.write(rec.csv_row() + "\n")

    def write_rewires_csv(self, stream: IO[str]) -> None:
        stream.write(rewire_stats_csv_header() + "\n")
        for st in self.rewires:
            stream.write(rewire_stats_csv_row(st) + "\n")

    def save(self, telemetry_path: str | Path,
             rewires_path: str | Path | None = None) -> None:
        with open(telemetry_path, "w", encoding="utf-8") as fh:
            self.write_csv(fh)
        if rewires_path is not None:
            with open(rewires_path, "w", encoding="utf-8") as fh:
                self.write_rewires_csv(fh)


class TrainingAbort(FaninError):
    """Raised on a non-finite loss; carries the last end-of-epoch model."""

    def __init__(self, message: str, last_good: Model | None, step: int):
        super().__init__(message)
        self.last_good = last_good
        self.step = step


def _meta_sets_for(ds: Dataset, clustering: LabelClustering) -> list[np.ndarray]:
    return [meta_targets(ds.labels_of(i), clustering)
            for i in range(ds.num_instances)]


class _ParamGroup:
    """A parameter array with its optimizer state and schedule role."""

    def __init__(self, param: np.ndarray, kind: str, wd: float, role: str):
        self.param = param
        self.state = OptimState.for_param(kind, param)
        self.wd = wd
        self.role = role  # encoder | classifier | aux | intermediate


def _build_groups(model: Model, cfg: TrainConfig) -> list[_ParamGroup]:
    groups: list[_ParamGroup] = []
    for w in model.encoder.weights:
        groups.append(_ParamGroup(w, cfg.optimizer_encoder,
                                  cfg.weight_decay_encoder, "encoder"))
    for b in model.encoder.biases:
        groups.append(_ParamGroup(b, cfg.optimizer_encoder, 0.0, "encoder"))
    if model.aux_w is not None:
        groups.append(_ParamGroup(model.aux_w, cfg.optimizer_encoder, 0.0, "aux"))
    if model.intermediate_w is not None:
        groups.append(_ParamGroup(model.intermediate_w, cfg.optimizer_classifier,
                                  0.0, "intermediate"))
        groups.append(_ParamGroup(model.intermediate_b, cfg.optimizer_classifier,
                                  0.0, "intermediate"))
    groups.append(_ParamGroup(model.head.weights, cfg.optimizer_classifier,
                              cfg.weight_decay_classifier, "classifier"))
    return groups


def train(train_set: Dataset, test_set: Dataset | None,
          clustering: LabelClustering | None,
          cfg: TrainConfig) -> tuple[Model, Telemetry]:
    """Run the full prune-regrow-train loop; returns the model and telemetry."""
    cfg.validate()
    if cfg.model.aux_enabled and clustering is None:
        raise ConfigError("aux_enabled requires a label clustering")
    if clustering is not None and clustering.num_labels != train_set.num_labels:
        raise ConfigError("clustering label count does not match dataset")
    dtype = PRECISIONS[cfg.precision]

    init_ss, shuffle_ss, drop_ss, rewire_ss = np.random.SeedSequence(
        cfg.seed).spawn(4)
    model = build_model(
        train_set.num_features, train_set.num_labels, cfg.model,
        np.random.default_rng(init_ss),
        num_clusters=clustering.num_clusters if cfg.model.aux_enabled else None,
        dropout=cfg.dropout, dtype=dtype)
    telemetry = Telemetry()
    n = train_set.num_instances
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    if cfg.epochs == 0:
        return model, telemetry
    if cfg.warmup_steps >= total_steps:
        raise ConfigError(f"warmup_steps {cfg.warmup_steps} must be < total "
                          f"steps {total_steps}")

    shuffle_rng = np.random.default_rng(shuffle_ss)
    drop_rng = np.random.default_rng(drop_ss)
    rewire_rng = np.random.default_rng(rewire_ss)
    meta_sets = (_meta_sets_for(train_set, clustering)
                 if cfg.model.aux_enabled else None)
    propensities = None
    if test_set is not None:
        from .data import compute_propensities
        try:
            propensities = compute_propensities(train_set.label_counts(), n)
        except ConfigError:
            propensities = None

    groups = _build_groups(model, cfg)
    head_state = groups[-1].state
    label_sets = train_set.label_sets()
    step = 0
    last_good: Model | None = None
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        scale = aux_scale(epoch, cfg.model) if cfg.model.aux_enabled else 0.0
        for start in range(0, n, cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            x = train_set.dense_batch(rows, dtype=dtype)
            batch_labels = [label_sets[i] for i in rows]
            out = model_forward(model, x, train=True, rng=drop_rng,
                                with_meta=cfg.model.aux_enabled and scale > 0)
            batch_meta = ([meta_sets[i] for i in rows]
                          if meta_sets is not None else None)
            lb = total_loss(out, batch_labels, batch_meta, epoch, cfg.model)
            if not math.isfinite(lb.total):
                raise TrainingAbort(f"non-finite loss at step {step}",
                                    last_good, step)
            grads = model_backward(model, out, lb.extreme_delta, lb.meta_delta)
            if lb.meta_delta is not None:
                telemetry.aux_backward_steps += 1

            lr_enc = lr_at(step, cfg.lr_encoder, cfg.warmup_steps, total_steps)
            lr_clf = lr_at(step, cfg.lr_classifier, cfg.warmup_steps, total_steps)
            grad_list = (grads.encoder_w + grads.encoder_b
                         + ([grads.aux] if model.aux_w is not None else [])
                         + ([grads.intermediate_w, grads.intermediate_b]
                            if model.intermediate_w is not None else [])
                         + [grads.head])
            for group, grad in zip(groups, grad_list):
                lr = {"encoder": lr_enc, "classifier": lr_clf,
                      "aux": cfg.lr_aux,
                      "intermediate": cfg.lr_intermediate}[group.role]
                if grad is None:
                    continue
                optimizer_step(group.param, grad, group.state, lr, group.wd)

            telemetry.records.append(TelemetryRecord(
                step=step, epoch=epoch, loss_extreme=lb.extreme,
                loss_meta=lb.meta, aux_scale=scale,
                grad_norm_encoder=grads.encoder_norm(),
                lr_enc=lr_enc, lr_clf=lr_clf))
            step += 1
            if should_rewire(step, total_steps, cfg.rewire):
                stats = prune_regrow(model.head, head_state.moment_arrays(),
                                     cfg.rewire, rewire_rng, step=step)
                telemetry.rewires.append(stats)
        last_good = model.copy()
        if test_set is not None:
            report = evaluate(model, test_set, propensities=propensities)
            telemetry.evals.append({"epoch": epoch, **report})
    return model, telemetry


def evaluate(model: Model, ds: Dataset, ks: Sequence[int] = (1, 3, 5),
             propensities: PropensityModel | np.ndarray | None = None,
             batch_size: int = 256) -> dict[str, float]:
    """Batched inference; P@k, PSP@k (when propensities given), Macro-P@k."""
    ks = tuple(ks)
    kmax = max(ks)
    if kmax > model.num_labels:
        raise ConfigError(f"k={kmax} exceeds label count {model.num_labels}")
    n = ds.num_instances
    rankings = np.empty((n, kmax), dtype=np.int64)
    for start in range(0, n, batch_size):
        rows = range(start, min(start + batch_size, n))
        x = ds.dense_batch(rows, dtype=model.head.dtype)
        out = model_forward(model, x, train=False, with_meta=False)
        rankings[start:start + len(rows)] = rank_batch(out.extreme_scores, kmax)
    p = None
    if propensities is not None:
        p = (propensities.values if isinstance(propensities, PropensityModel)
             else np.asarray(propensities))
    return metrics_from_rankings(ds.label_sets(), rankings, p, ks,
                                 ds.num_labels)


def evaluate_meta(model: Model, ds: Dataset, clustering: LabelClustering,
                  ks: Sequence[int] = (1,),
                  batch_size: int = 256) -> dict[str, float]:
    """Precision of the aux head against cluster-level targets."""
    if model.aux_w is None:
        raise ConfigError("model has no aux head")
    n = ds.num_instances
    kmax = max(ks)
    rankings = np.empty((n, kmax), dtype=np.int64)
    for start in range(0, n, batch_size):
        rows = range(start, min(start + batch_size, n))
        x = ds.dense_batch(rows, dtype=model.head.dtype)
        out = model_forward(model, x, train=False, with_meta=True)
        rankings[start:start + len(rows)] = rank_batch(out.meta_scores, kmax)
    targets = [meta_targets(ds.labels_of(i), clustering) for i in range(n)]
    return {f"metaP@{k}": precision_at_k(targets, rankings, k) for k in ks}
