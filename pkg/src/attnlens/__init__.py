"""
attnlens - attention relevance maps for vision transformers

Gradient-weighted attention propagated through toy ViT and Swin models,
with LayerNorm token-std rescaling, stage composition and evaluation.
"""

__version__ = "0.1.0"

from .attribution import AttributionOptions, Heatmap, attribute, compose_stages, rollout
from .errors import AttnLensError
from .evaluation import evaluate_perturbation, evaluate_segmentation, seg_metrics
from .formats import load_image, load_weights, save_heatmap, save_weights
from .models import ModelConfig, TransformerModel, forward, init_weights
from .pipeline import attribute_image, evaluate_dataset, make_toy

__all__ = [
    "AttributionOptions",
    "Heatmap",
    "attribute",
    "compose_stages",
    "rollout",
    "AttnLensError",
    "evaluate_perturbation",
    "evaluate_segmentation",
    "seg_metrics",
    "load_image",
    "load_weights",
    "save_heatmap",
    "save_weights",
    "ModelConfig",
    "TransformerModel",
    "forward",
    "init_weights",
    "attribute_image",
    "evaluate_dataset",
    "make_toy",
]
