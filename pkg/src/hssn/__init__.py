"""Hybrid style siamese network for complementary item retrieval.

A shared-weight convolutional embedder whose early blocks feed gram-matrix
style heads, trained with a triplet loss plus a negated per-layer style
loss between positive and negative items, and scored with bidirectional
reciprocal-rank MAP.
"""

from .data import FoldSplit, ItemRecord, Triplet, apply_mask, build_triplets, kfold_split, load_manifest
from .estimator import HybridStyleSiamese
from .evaluate import EvalPairSet, RankResult, compute_map, rank_pairs, retrieve
from .losses import KlPolicy, LossParams, distance, hybrid_loss, layer_style_loss, style_loss_reference, triplet_loss
from .model import ForwardOutput, Model, ModelConfig, build_model, embed, forward, load_checkpoint, save_checkpoint
from .synthetic import generate_synthetic
from .tensor import Tensor, finite_diff_check
from .train import AdamState, Schedule, TrainConfig, adam_step, improvement_pct, lr_at, run_experiment, train

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "EvalPairSet",
    "FoldSplit",
    "ForwardOutput",
    "HybridStyleSiamese",
    "ItemRecord",
    "KlPolicy",
    "LossParams",
    "Model",
    "ModelConfig",
    "RankResult",
    "Schedule",
    "Tensor",
    "TrainConfig",
    "Triplet",
    "adam_step",
    "apply_mask",
    "build_model",
    "build_triplets",
    "compute_map",
    "distance",
    "embed",
    "finite_diff_check",
    "forward",
    "generate_synthetic",
    "hybrid_loss",
    "improvement_pct",
    "kfold_split",
    "layer_style_loss",
    "load_checkpoint",
    "load_manifest",
    "lr_at",
    "rank_pairs",
    "retrieve",
    "run_experiment",
    "save_checkpoint",
    "style_loss_reference",
    "train",
    "triplet_loss",
]
