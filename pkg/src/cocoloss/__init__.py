"""Congenerous cosine (COCO) metric learning on numpy.

Submodules: ``numerics`` (normalisation, finite differences), ``losses``
(COCO forward/backward, baselines), ``alignment`` (keypoint transforms),
``trainer`` (toy MLP training, gradient checks, separation statistics),
``identify`` (multi-region gallery/probe identification), ``formats``
(file I/O) and ``cli``.
"""

from .alignment import AlignmentTransform, estimate_affine, estimate_similarity, apply_transform
from .identify import FusionConfig, fuse_scores, identify, normalize_scores, predict_identity, raw_scores
from .losses import CentroidMode, CentroidSet, EmbeddingBatch, coco_backward, coco_forward
from .numerics import finite_difference_grad, l2_normalize
from .trainer import MlpModel, TrainConfig, grad_check, make_blobs, separation_stats, train

__version__ = "0.1.0"

__all__ = [
    "AlignmentTransform", "CentroidMode", "CentroidSet", "EmbeddingBatch", "FusionConfig",
    "MlpModel", "TrainConfig", "apply_transform", "coco_backward", "coco_forward",
    "estimate_affine", "estimate_similarity", "finite_difference_grad", "fuse_scores",
    "grad_check", "identify", "l2_normalize", "make_blobs", "normalize_scores",
    "predict_identity", "raw_scores", "separation_stats", "train",
]
