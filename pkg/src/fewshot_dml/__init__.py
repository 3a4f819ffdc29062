"""Cross-entropy plus deep-metric-learning objectives for few-shot classification."""

from .dataio import BlobSpec, Dataset, LabeledExample, generate_blobs, load_dataset, save_dataset, stratified_sample
from .evaluation import (CVResult, GroupReport, Metrics, compare_models, compute_metrics,
                         distance_bucket_accuracy, group_analysis, mann_whitney_u, run_cv)
from .losses import (CombinedConfig, LossBundle, SoftTripleConfig, SupConConfig, cce, combined, grad_check,
                     softtriple, softtriple_similarity, supcon)
from .numerics import Rng, dot, l2_normalize, logsumexp, project_2d, softmax
from .trainer import TrainConfig, adamw_step, default_config, lr_at, train

__version__ = "0.1.0"

__all__ = [
    "adamw_step", "BlobSpec", "cce", "combined", "CombinedConfig", "compare_models", "compute_metrics",
    "CVResult", "Dataset", "default_config", "distance_bucket_accuracy", "dot", "generate_blobs", "grad_check",
    "group_analysis", "GroupReport", "l2_normalize", "LabeledExample", "load_dataset", "logsumexp",
    "LossBundle", "lr_at", "mann_whitney_u", "Metrics", "project_2d", "Rng", "run_cv",
    "save_dataset", "softmax", "softtriple", "softtriple_similarity", "SoftTripleConfig",
    "stratified_sample", "supcon", "SupConConfig", "train", "TrainConfig",
]
