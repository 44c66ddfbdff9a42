"""Model assembly: MLP encoder, optional intermediate layer, fixed fan-in
extreme head, dense auxiliary meta head; losses and the aux decay schedule.

The auxiliary branch taps the encoder embedding (before the intermediate
layer) and never feeds the extreme head, so the two heads share only the
encoder.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .layer import (FixedFanInLayer, SparseDelta, ffi_backward_input,
                    ffi_backward_weights, ffi_forward, random_layer,
                    read_layer, write_layer)

LOSS_KINDS = ("squared_hinge", "bce")
NO_CUTOFF = None  # sentinel: aux scale stays at its initial value for the run


@dataclass
class ModelConfig:
    """Architecture and loss settings."""

    encoder_dims: tuple[int, ...] = (256,)
    fan_in: int = 32
    use_intermediate: bool = False
    intermediate_size: int = 0
    aux_enabled: bool = False
    aux_cutoff_epoch: int | None = 10
    aux_initial_scale: float = 1.0
    loss: str = "squared_hinge"
    pos_weight: float = 1.0

    @property
    def embed_dim(self) -> int:
        return self.encoder_dims[-1]

    def validate(self) -> None:
        if not self.encoder_dims:
            raise ConfigError("encoder_dims must name at least the embedding dim")
        if any(d < 1 for d in self.encoder_dims):
            raise ConfigError("encoder dims must be >= 1")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.use_intermediate and self.intermediate_size < self.embed_dim:
            raise ConfigError("intermediate layer must be at least as wide as "
                              "the embedding")
        if self.aux_enabled:
            if self.aux_initial_scale <= 0:
                raise ConfigError("aux_initial_scale must be > 0 when aux is on")
            if self.aux_cutoff_epoch is not None and self.aux_cutoff_epoch < 0:
                raise ConfigError("aux_cutoff_epoch must be >= 0 or none")
        if self.fan_in < 1:
            raise ConfigError("fan_in must be >= 1")


@dataclass
class EncoderMLP:
    """Dense ReLU MLP over (densified) sparse feature rows."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dropout: float = 0.0

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def embed_dim(self) -> int:
        return self.weights[-1].shape[1]


def init_encoder(input_dim: int, dims: Sequence[int], rng: np.random.Generator,
                 dropout: float = 0.0, dtype=np.float32) -> EncoderMLP:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases."""
    if not 0 <= dropout < 1:
        raise ConfigError(f"dropout must be in [0, 1), got {dropout}")
    weights, biases = [], []
    prev = input_dim
    for d in dims:
        bound = 1.0 / np.sqrt(prev)
        weights.append(rng.uniform(-bound, bound, size=(prev, d)).astype(dtype))
        biases.append(np.zeros(d, dtype=dtype))
        prev = d
    return EncoderMLP(weights, biases, dropout)


@dataclass
class Model:
    """Encoder plus heads; the container the train loop mutates."""

    encoder: EncoderMLP
    head: FixedFanInLayer
    config: ModelConfig
    intermediate_w: np.ndarray | None = None
    intermediate_b: np.ndarray | None = None
    aux_w: np.ndarray | None = None

    @property
    def num_labels(self) -> int:
        return self.head.rows

    @property
    def num_clusters(self) -> int | None:
        return None if self.aux_w is None else self.aux_w.shape[1]

    def copy(self) -> "Model":
        return Model(
            encoder=EncoderMLP([w.copy() for w in self.encoder.weights],
                               [b.copy() for b in self.encoder.biases],
                               self.encoder.dropout),
            head=self.head.copy(),
            config=self.config,
            intermediate_w=None if self.intermediate_w is None
            else self.intermediate_w.copy(),
            intermediate_b=None if self.intermediate_b is None
            else self.intermediate_b.copy(),
            aux_w=None if self.aux_w is None else self.aux_w.copy(),
        )


def build_model(input_dim: int, num_labels: int, cfg: ModelConfig,
                rng: np.random.Generator, num_clusters: int | None = None,
                dropout: float = 0.0, dtype=np.float32) -> Model:
    cfg.validate()
    encoder = init_encoder(input_dim, cfg.encoder_dims, rng, dropout, dtype)
    head_in = cfg.intermediate_size if cfg.use_intermediate else cfg.embed_dim
    if cfg.fan_in > head_in:
        raise ConfigError(f"fan_in {cfg.fan_in} exceeds head input dim {head_in}")
    inter_w = inter_b = aux_w = None
    if cfg.use_intermediate:
        bound = 1.0 / np.sqrt(cfg.embed_dim)
        inter_w = rng.uniform(-bound, bound,
                              size=(cfg.embed_dim, cfg.intermediate_size)).astype(dtype)
        inter_b = np.zeros(cfg.intermediate_size, dtype=dtype)
    head = random_layer(num_labels, head_in, cfg.fan_in, rng, dtype=dtype)
    if cfg.aux_enabled:
        if num_clusters is None:
            raise ConfigError("aux head requires a clustering (num_clusters)")
        bound = 1.0 / np.sqrt(cfg.embed_dim)
        aux_w = rng.uniform(-bound, bound,
                            size=(cfg.embed_dim, num_clusters)).astype(dtype)
    return Model(encoder, head, cfg, inter_w, inter_b, aux_w)


@dataclass
class ForwardCache:
    """Activations saved by model_forward for the backward pass."""

    x: np.ndarray
    hidden_inputs: list[np.ndarray]
    relu_masks: list[np.ndarray]
    dropout_masks: list[np.ndarray | None]
    embedding: np.ndarray
    inter_pre: np.ndarray | None
    head_input: np.ndarray


@dataclass
class ModelOutput:
    extreme_scores: np.ndarray
    meta_scores: np.ndarray | None
    cache: ForwardCache = field(repr=False)


def encoder_forward(enc: EncoderMLP, x: np.ndarray, train: bool = False,
                    rng: np.random.Generator | None = None):
    """Returns the embedding plus the caches backward needs."""
    n = len(enc.weights)
    hidden_inputs, relu_masks, drop_masks = [], [], []
    a = x
    for i, (w, b) in enumerate(zip(enc.weights, enc.biases)):
        hidden_inputs.append(a)
        z = a @ w + b
        if i < n - 1:
            mask = z > 0
            relu_masks.append(mask)
            a = z * mask
        else:
            a = z
        if train and enc.dropout > 0:
            if rng is None:
                raise ConfigError("dropout in train mode needs an rng")
            keep = (rng.random(a.shape) >= enc.dropout)
            a = a * keep / (1.0 - enc.dropout)
            drop_masks.append(keep)
        else:
            drop_masks.append(None)
    return a, hidden_inputs, relu_masks, drop_masks


def model_forward(model: Model, x: np.ndarray, train: bool = False,
                  rng: np.random.Generator | None = None,
                  with_meta: bool | None = None) -> ModelOutput:
    """Score a batch; meta scores are computed iff the aux head exists
    (override with ``with_meta``)."""
    x = np.asarray(x, dtype=model.head.dtype)
    if x.ndim != 2 or x.shape[1] != model.encoder.input_dim:
        raise ShapeError(f"batch shape {x.shape} does not match encoder input "
                         f"dim {model.encoder.input_dim}")
    emb, hidden_inputs, relu_masks, drop_masks = encoder_forward(
        model.encoder, x, train, rng)
    if with_meta is None:
        with_meta = model.aux_w is not None
    meta = emb @ model.aux_w if (with_meta and model.aux_w is not None) else None
    inter_pre = None
    head_in = emb
    if model.intermediate_w is not None:
        inter_pre = emb @ model.intermediate_w + model.intermediate_b
        head_in = inter_pre * (inter_pre > 0)
    scores = ffi_forward(model.head, head_in)
    cache = ForwardCache(x, hidden_inputs, relu_masks, drop_masks, emb,
                         inter_pre, head_in)
    return ModelOutput(scores, meta, cache)


@dataclass
class ModelGrads:
    """Gradients congruent to the model's parameter arrays."""

    encoder_w: list[np.ndarray]
    encoder_b: list[np.ndarray]
    head: np.ndarray
    intermediate_w: np.ndarray | None = None
    intermediate_b: np.ndarray | None = None
    aux: np.ndarray | None = None

    def encoder_norm(self) -> float:
        total = sum(float((g * g).sum()) for g in self.encoder_w)
        total += sum(float((g * g).sum()) for g in self.encoder_b)
        return float(np.sqrt(total))


def model_backward(model: Model, out: ModelOutput,
                   extreme_delta: SparseDelta,
                   meta_delta: np.ndarray | None) -> ModelGrads:
    """Backpropagate both head deltas to all parameter gradients.

    ``meta_delta`` must already include the aux scale factor; pass None to
    skip the aux branch entirely.
    """
    cache = out.cache
    batch = cache.x.shape[0]
    head_grad = ffi_backward_weights(model.head, cache.head_input, extreme_delta)
    d_head_in = ffi_backward_input(model.head, extreme_delta, batch)
    inter_wg = inter_bg = None
    if model.intermediate_w is not None:
        d_pre = d_head_in * (cache.inter_pre > 0)
        inter_wg = cache.embedding.T @ d_pre
        inter_bg = d_pre.sum(axis=0)
        d_emb = d_pre @ model.intermediate_w.T
    else:
        d_emb = d_head_in
    aux_g = None
    if meta_delta is not None:
        if model.aux_w is None:
            raise ShapeError("meta delta given but model has no aux head")
        aux_g = cache.embedding.T @ meta_delta
        d_emb = d_emb + meta_delta @ model.aux_w.T

    enc = model.encoder
    n = len(enc.weights)
    enc_wg: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    enc_bg: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    d_a = d_emb
    for i in range(n - 1, -1, -1):
        keep = cache.dropout_masks[i]
        if keep is not None:
            d_a = d_a * keep / (1.0 - enc.dropout)
        d_z = d_a if i == n - 1 else d_a * cache.relu_masks[i]
        enc_wg[i] = cache.hidden_inputs[i].T @ d_z
        enc_bg[i] = d_z.sum(axis=0)
        if i > 0:
            d_a = d_z @ enc.weights[i].T
    return ModelGrads(enc_wg, enc_bg, head_grad, inter_wg, inter_bg, aux_g)


def _targets_matrix(label_sets: Sequence[np.ndarray], batch: int,
                    num_labels: int, dtype) -> np.ndarray:
    if len(label_sets) != batch:
        raise ShapeError("one label set per sample required")
    y = np.zeros((batch, num_labels), dtype=dtype)
    for i, pos in enumerate(label_sets):
        y[i, np.asarray(pos, dtype=np.int64)] = 1
    return y


def squared_hinge_loss(scores: np.ndarray,
                       label_sets: Sequence[np.ndarray]) -> tuple[float, SparseDelta]:
    """One-vs-all squared hinge, averaged over the batch.

    The derivative of max(0, 1 - y s)^2 is exactly zero for every entry
    with y s >= 1, so well-classified negatives drop out of the returned
    SparseDelta — the activation sparsity the backward kernels exploit.
    """
    batch, num_labels = scores.shape
    y = _targets_matrix(label_sets, batch, num_labels, scores.dtype)
    y = 2 * y - 1
    margin = 1.0 - y * scores
    np.maximum(margin, 0, out=margin)
    loss = float((margin * margin).sum()) / batch
    dense = (-2.0 / batch) * y * margin
    return loss, SparseDelta.from_dense(dense, num_labels)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def bce_loss(scores: np.ndarray, label_sets: Sequence[np.ndarray],
             pos_weight: float = 1.0) -> tuple[float, np.ndarray]:
    """Sigmoid cross-entropy, averaged over the batch; dense derivative."""
    batch, num_labels = scores.shape
    y = _targets_matrix(label_sets, batch, num_labels, scores.dtype)
    softplus_neg = np.logaddexp(0, -scores)
    softplus_pos = np.logaddexp(0, scores)
    loss = float((pos_weight * y * softplus_neg
                  + (1 - y) * softplus_pos).sum()) / batch
    sig = _sigmoid(scores)
    dense = (pos_weight * y * (sig - 1) + (1 - y) * sig) / batch
    return loss, dense.astype(scores.dtype)


BCE_SPARSIFY_TOL = 1e-12


def extreme_loss(scores: np.ndarray, label_sets: Sequence[np.ndarray],
                 cfg: ModelConfig) -> tuple[float, SparseDelta]:
    """Dispatch on cfg.loss, always yielding a SparseDelta for the head."""
    if cfg.loss == "squared_hinge":
        return squared_hinge_loss(scores, label_sets)
    loss, dense = bce_loss(scores, label_sets, cfg.pos_weight)
    return loss, SparseDelta.from_dense(dense, scores.shape[1],
                                        drop_below=BCE_SPARSIFY_TOL)


def dense_loss(scores: np.ndarray, label_sets: Sequence[np.ndarray],
               cfg: ModelConfig) -> tuple[float, np.ndarray]:
    """Same loss kinds with a dense derivative, for the dense meta head."""
    if cfg.loss == "squared_hinge":
        loss, sparse = squared_hinge_loss(scores, label_sets)
        return loss, sparse.to_dense()
    return bce_loss(scores, label_sets, cfg.pos_weight)


def aux_scale(epoch: int, cfg: ModelConfig) -> float:
    """Linear decay from the initial scale to zero at the cutoff epoch.

    Cutoff None means no cutoff (constant scale); cutoff 0 means the aux
    loss is never applied.
    """
    if not cfg.aux_enabled:
        raise ConfigError("aux_scale queried with aux disabled")
    if cfg.aux_cutoff_epoch is NO_CUTOFF:
        return cfg.aux_initial_scale
    if cfg.aux_cutoff_epoch == 0 or epoch >= cfg.aux_cutoff_epoch:
        return 0.0
    return cfg.aux_initial_scale * (1.0 - epoch / cfg.aux_cutoff_epoch)


@dataclass
class LossBreakdown:
    total: float
    extreme: float
    meta: float
    scale: float
    extreme_delta: SparseDelta
    meta_delta: np.ndarray | None


def total_loss(output: ModelOutput, label_sets: Sequence[np.ndarray],
               meta_sets: Sequence[np.ndarray] | None, epoch: int,
               cfg: ModelConfig) -> LossBreakdown:
    """Extreme loss plus the scaled meta loss.

    When the scale is zero (cutoff reached, or aux disabled) the meta loss
    and its backward pass are skipped entirely.
    """
    ex_loss, ex_delta = extreme_loss(output.extreme_scores, label_sets, cfg)
    scale = aux_scale(epoch, cfg) if cfg.aux_enabled else 0.0
    if scale <= 0 or output.meta_scores is None:
        return LossBreakdown(ex_loss, ex_loss, 0.0, scale, ex_delta, None)
    if meta_sets is None:
        raise ConfigError("aux is active but no meta targets were given")
    meta_loss, meta_dense = dense_loss(output.meta_scores, meta_sets, cfg)
    return LossBreakdown(ex_loss + scale * meta_loss, ex_loss, meta_loss,
                         scale, ex_delta, scale * meta_dense)


CHECKPOINT_VERSION = 1


def save_checkpoint(model: Model, path: str | Path) -> None:
    """Versioned npz container with every parameter array and the config."""
    cfg = model.config
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": {
            "encoder_dims": list(cfg.encoder_dims),
            "fan_in": cfg.fan_in,
            "use_intermediate": cfg.use_intermediate,
            "intermediate_size": cfg.intermediate_size,
            "aux_enabled": cfg.aux_enabled,
            "aux_cutoff_epoch": cfg.aux_cutoff_epoch,
            "aux_initial_scale": cfg.aux_initial_scale,
            "loss": cfg.loss,
            "pos_weight": cfg.pos_weight,
        },
        "dropout": model.encoder.dropout,
        "num_layers": len(model.encoder.weights),
    }
    buf = io.StringIO()
    write_layer(model.head, buf)
    arrays = {"head_dump": np.frombuffer(buf.getvalue().encode(), dtype=np.uint8)}
    for i, (w, b) in enumerate(zip(model.encoder.weights, model.encoder.biases)):
        arrays[f"enc_w{i}"] = w
        arrays[f"enc_b{i}"] = b
    if model.intermediate_w is not None:
        arrays["inter_w"] = model.intermediate_w
        arrays["inter_b"] = model.intermediate_b
    if model.aux_w is not None:
        arrays["aux_w"] = model.aux_w
    arrays["meta_json"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path: str | Path) -> Model:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta_json"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ConfigError(f"checkpoint version {meta['version']} unsupported")
        c = meta["config"]
        cfg = ModelConfig(
            encoder_dims=tuple(c["encoder_dims"]),
            fan_in=c["fan_in"],
            use_intermediate=c["use_intermediate"],
            intermediate_size=c["intermediate_size"],
            aux_enabled=c["aux_enabled"],
            aux_cutoff_epoch=c["aux_cutoff_epoch"],
            aux_initial_scale=c["aux_initial_scale"],
            loss=c["loss"],
            pos_weight=c["pos_weight"],
        )
        weights = [z[f"enc_w{i}"] for i in range(meta["num_layers"])]
        biases = [z[f"enc_b{i}"] for i in range(meta["num_layers"])]
        head = read_layer(io.StringIO(bytes(z["head_dump"]).decode()))
        inter_w = z["inter_w"] if "inter_w" in z else None
        inter_b = z["inter_b"] if "inter_b" in z else None
        aux_w = z["aux_w"] if "aux_w" in z else None
    encoder = EncoderMLP(weights, biases, meta["dropout"])
    return Model(encoder, head, cfg, inter_w, inter_b, aux_w)
