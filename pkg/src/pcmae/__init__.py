"""Self-supervised masked autoencoder for point clouds.

Geometric tokenization (SPFH descriptors + adaptive saliency gating), an
external-attention transformer encoder, masked patch reconstruction with an
L2 Chamfer objective, and classification fine-tuning protocols.
"""

from .config import FinetuneProtocol, ModelConfig, TrainConfig
from .geometry import PointCloud, build_patches, estimate_normals, normalize_cloud
from .pipeline import (chamfer_l2, extract_global_feature, init_pretrain_params,
                       pretrain_forward, random_mask)
from .training import evaluate_classifier, few_shot_episode, finetune, pretrain_loop

__version__ = "0.1.0"

__all__ = [
    "FinetuneProtocol", "ModelConfig", "TrainConfig", "PointCloud",
    "build_patches", "estimate_normals", "normalize_cloud", "chamfer_l2",
    "extract_global_feature", "init_pretrain_params", "pretrain_forward",
    "random_mask", "evaluate_classifier", "few_shot_episode", "finetune",
    "pretrain_loop",
]
