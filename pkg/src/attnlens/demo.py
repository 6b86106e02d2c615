"""
Corner-collapse demonstration.

A hand-built single-stage Swin model with four tokens on a 2×2 grid. Token 3
(the object) carries the class evidence; token 0 (the corner) has a norm
a hundred times larger and therefore by far the largest LayerNorm std.
Gradient-weighted attention without std scaling piles its relevance onto the
corner, while std scaling moves the argmax back onto the object.

The pipeline result is checked against a brute-force oracle that takes the
attention gradient from central finite differences and redoes head fusion,
std scaling, normalization and the readout with plain numpy.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from .attribution import AttributionOptions, attribute
from .autodiff import finite_diff_grad, max_relative_error
from .models import ModelConfig, TransformerModel, forward, required_weight_shapes

logger = logging.getLogger(__name__)

OBJECT_TOKEN = 3
CORNER_TOKEN = 0
EXPLAINED_CLASS = 0
ORACLE_TOLERANCE = 1e-4

# Token embeddings, grid row-major
TOKENS = np.array(
    [
        [0.0, 0.0, 100.0, 0.0],  # corner: large norm, largest std
        [0.0, 0.0, -1.0, 1.0],
        [0.0, 0.0, -1.0, 0.0],
        [0.0, 0.0, 1.0, -1.0],  # object
    ]
)


@dataclass(frozen=True)
class DemoResult:
    heatmap_with_std: np.ndarray
    heatmap_without_std: np.ndarray
    token_std: np.ndarray
    oracle_error: float

    @property
    def argmax_with_std(self) -> int:
        return int(np.argmax(self.heatmap_with_std))

    @property
    def argmax_without_std(self) -> int:
        return int(np.argmax(self.heatmap_without_std))

    @property
    def max_std_token(self) -> int:
        return int(np.argmax(self.token_std))

    @property
    def passed(self) -> bool:
        return (
            self.argmax_with_std == OBJECT_TOKEN
            and self.argmax_without_std == self.max_std_token
            and self.oracle_error < ORACLE_TOLERANCE
        )

    def to_dict(self) -> Dict:
        return {
            "object_token": OBJECT_TOKEN,
            "max_std_token": self.max_std_token,
            "argmax_with_std": self.argmax_with_std,
            "argmax_without_std": self.argmax_without_std,
            "heatmap_with_std": self.heatmap_with_std.reshape(-1).tolist(),
            "heatmap_without_std": self.heatmap_without_std.reshape(-1).tolist(),
            "token_std": self.token_std.tolist(),
            "oracle_error": self.oracle_error,
            "passed": self.passed,
        }


def demo_config() -> ModelConfig:
    return ModelConfig(
        variant="swin",
        embed_dim=4,
        heads=1,
        stage_depths=(1,),
        image_size=4,
        channels=1,
        patch_size=2,
        window_side=2,
        num_classes=2,
    )


def demo_model() -> Tuple[TransformerModel, np.ndarray]:
    """
    Returns:
        Tuple of (model, image). Patch embedding is the identity, queries and
        keys are zero (uniform attention), values are the normalized tokens,
        and the projection writes channel 2 of the context into the
        class-0 direction (1, -1, 0, 0).
    """
    cfg = demo_config()
    tensors = {name: np.zeros(shape) for name, shape in required_weight_shapes(cfg).items()}
    d = cfg.embed_dim
    direction = np.array([1.0, -1.0, 0.0, 0.0])

    tensors["patch_embed.weight"] = np.eye(d)
    qkv = np.zeros((d, 3 * d))
    qkv[:, 2 * d :] = np.eye(d)
    tensors["blocks.0.attn.qkv.weight"] = qkv
    proj = np.zeros((d, d))
    proj[2] = direction
    tensors["blocks.0.attn.proj.weight"] = proj
    for name in ("blocks.0.norm1.weight", "blocks.0.norm2.weight", "norm.weight"):
        tensors[name] = np.ones(d)
    head = np.zeros((d, cfg.num_classes))
    head[:, EXPLAINED_CLASS] = direction
    tensors["head.weight"] = head
    tensors["head.bias"] = np.array([1.0, 0.0])

    side, p = cfg.grid_side(0), cfg.patch_size
    image = (
        TOKENS.reshape(side, side, p, p, cfg.channels)
        .transpose(0, 2, 1, 3, 4)
        .reshape(cfg.image_size, cfg.image_size, cfg.channels)
    )
    return TransformerModel(cfg, tensors), image


def _oracle_heatmap(model: TransformerModel, image: np.ndarray, use_std: bool) -> np.ndarray:
    cfg = model.config
    _, trace = model.forward(image, dtype=np.float64)
    record = trace.records[0]

    def logit(attention: np.ndarray) -> float:
        logits, _ = forward(cfg, model.weights, image, np.float64, {0: attention})
        return float(logits[EXPLAINED_CLASS])

    attention = record.attention.astype(np.float64)
    gradient = finite_diff_grad(logit, attention)[0, 0]
    fused = np.maximum(gradient * attention[0, 0], 0.0)
    if use_std:
        tokens = TOKENS
        centred = tokens - tokens.mean(axis=1, keepdims=True)
        std = np.sqrt((centred**2).mean(axis=1) + cfg.ln_eps)
        fused = fused / std[None, :]
    fused = fused / fused.sum()
    relevance = np.eye(fused.shape[0]) + fused
    return relevance.sum(axis=0)


def run_demo() -> DemoResult:
    model, image = demo_model()
    _, trace = model.forward(image)
    trace = model.backward_attention_grads(trace, EXPLAINED_CLASS)

    maps = {}
    error = 0.0
    for use_std in (True, False):
        opts = AttributionOptions(use_std_scaling=use_std, target=EXPLAINED_CLASS)
        grid = attribute(trace, opts).grid.reshape(-1)
        oracle = _oracle_heatmap(model, image, use_std)
        error = max(error, max_relative_error(grid, oracle))
        maps[use_std] = grid
        logger.info("std scaling %s: heatmap %s", "on" if use_std else "off", grid)

    return DemoResult(
        heatmap_with_std=maps[True],
        heatmap_without_std=maps[False],
        token_std=np.asarray(trace.token_stats[0].std, dtype=np.float64).reshape(-1),
        oracle_error=error,
    )
