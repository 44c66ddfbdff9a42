"""Dynamic sparse training with fixed fan-in output layers for very large
label spaces: sparse kernels, SET-style rewiring, balanced label clustering,
an auxiliary meta-classifier objective, and XMC ranking metrics.
"""

__version__ = "0.1.0"

from .clustering import (LabelClustering, balanced_kmeans, build_label_features,
                         cluster_overlap, meta_targets, random_clustering)
from .data import (Dataset, DatasetStats, PropensityModel, compute_propensities,
                   compute_stats, generate_synthetic, load_xmc_file,
                   parse_xmc_file, save_xmc_file)
from .layer import (KERNEL_BACKEND, FixedFanInLayer, SparseDelta,
                    ffi_backward_input, ffi_backward_weights, ffi_forward,
                    from_dense, head_memory_bytes, memory_overhead,
                    random_layer, sparsity_of)
from .metrics import (macro_p_at_k, metrics_report, precision_at_k, psp_at_k,
                      rank_batch, top_k)
from .model import (EncoderMLP, Model, ModelConfig, ModelOutput, aux_scale,
                    bce_loss, build_model, load_checkpoint, model_backward,
                    model_forward, save_checkpoint, squared_hinge_loss,
                    total_loss)
from .optim import OptimState, lr_at, optimizer_step
from .rewire import RewireConfig, RewireStats, prune_regrow, should_rewire
from .train import Telemetry, TrainConfig, evaluate, evaluate_meta, train

__all__ = [
    "__version__",
    "Dataset", "DatasetStats", "PropensityModel", "parse_xmc_file",
    "load_xmc_file", "save_xmc_file", "compute_stats", "compute_propensities",
    "generate_synthetic",
    "FixedFanInLayer", "SparseDelta", "KERNEL_BACKEND", "ffi_forward",
    "ffi_backward_weights", "ffi_backward_input", "from_dense", "random_layer",
    "memory_overhead", "head_memory_bytes", "sparsity_of",
    "RewireConfig", "RewireStats", "should_rewire", "prune_regrow",
    "LabelClustering", "build_label_features", "balanced_kmeans",
    "random_clustering", "meta_targets", "cluster_overlap",
    "EncoderMLP", "Model", "ModelConfig", "ModelOutput", "build_model",
    "model_forward", "model_backward", "squared_hinge_loss", "bce_loss",
    "aux_scale", "total_loss", "save_checkpoint", "load_checkpoint",
    "OptimState", "lr_at", "optimizer_step",
    "TrainConfig", "Telemetry", "train", "evaluate", "evaluate_meta",
    "top_k", "rank_batch", "precision_at_k", "psp_at_k", "macro_p_at_k",
    "metrics_report",
]
