"""
Relevance propagation through attention.

Per block the fused attention is

    Ā = mean_h (∇A ⊙ A)⁺          (head fusion)
    Ā = Ā / std                   (column j divided by the LayerNorm std of token j)
    Ā = Ā / Ā.sum()               (sum normalization)
    R = R + Ā·R                   (block update, R starts at identity)

Stages of a Swin model are composed with R ← R^i · f(R), where f averages
the rows of the tokens merged into each coarse token. Rows of every
relevance matrix index output tokens, columns index input tokens.

All relevance arithmetic is done in float64.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple, Union

import numpy as np
from PIL import Image

from .errors import ConfigError, ContractError, DimensionError, UnsupportedVariantError
from .models import ForwardTrace, MergeMap, assemble_full_attention

logger = logging.getLogger(__name__)

DEGENERATE_SUM = 1e-12
MERGE_REDUCTIONS = ("mean", "max")
NORMALIZE_SCOPES = ("matrix", "rows")
UPSAMPLE_METHODS = ("nearest", "bilinear")


@dataclass(frozen=True)
class AttributionOptions:
    """
    Switches of the relevance pipeline.

    Args:
        start_stage: First stage taken into account (None = last stage)
        use_std_scaling: Divide fused attention columns by token std
        use_sum_normalize: Rescale fused attention to unit sum
        use_gradients: Weight attention by its gradient; off uses unit gradients
        target: 'predicted' or an explicit class index
        merge_reduce: Row reduction across merged tokens ('mean' or 'max')
        normalize_scope: 'matrix' (one sum for the whole matrix) or 'rows'
    """

    start_stage: Optional[int] = None
    use_std_scaling: bool = True
    use_sum_normalize: bool = True
    use_gradients: bool = True
    target: Union[str, int] = "predicted"
    merge_reduce: str = "mean"
    normalize_scope: str = "matrix"

    def __post_init__(self):
        if self.merge_reduce not in MERGE_REDUCTIONS:
            raise ConfigError(f"Unknown merge reduction: {self.merge_reduce}")
        if self.normalize_scope not in NORMALIZE_SCOPES:
            raise ConfigError(f"Unknown normalize scope: {self.normalize_scope}")
        if self.start_stage is not None and self.start_stage < 0:
            raise ConfigError(f"start_stage must be >= 0, got {self.start_stage}")
        if isinstance(self.target, str) and self.target != "predicted":
            raise ConfigError(f"target must be 'predicted' or a class index, got {self.target!r}")

    def resolve_start(self, stage_count: int) -> int:
        j = stage_count - 1 if self.start_stage is None else self.start_stage
        if not 0 <= j < stage_count:
            raise ConfigError(f"start stage {j} out of range for {stage_count} stage(s)")
        return j

    def resolve_target(self, predicted: int) -> int:
        return predicted if self.target == "predicted" else int(self.target)


@dataclass(frozen=True)
class RelevanceMatrix:
    """values[r, c]: influence of input token c (col_stage) on output token r (row_stage)."""

    values: np.ndarray
    row_stage: int
    col_stage: int
    degenerate_blocks: Tuple[int, ...] = ()

    @property
    def row_tokens(self) -> int:
        return self.values.shape[0]

    @property
    def col_tokens(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class Heatmap:
    """
    Relevance per input token, optionally upsampled to pixels.

    degenerate is set when the grid carries no spatial information (flat).
    """

    grid: np.ndarray
    degenerate: bool
    degenerate_blocks: Tuple[int, ...] = ()
    pixels: Optional[np.ndarray] = field(default=None, repr=False)

    def to_pixels(self, height: int, width: int, method: str = "nearest") -> "Heatmap":
        return replace(self, pixels=upsample(self.grid, height, width, method))


# ---------------------------------------------------------------------------
# Per-block operations
# ---------------------------------------------------------------------------


def fuse_heads(attention: np.ndarray, gradient: np.ndarray) -> np.ndarray:
    """Mean over heads of clamp_nonneg(gradient ⊙ attention); inputs are (heads, N, N)."""
    attention = np.asarray(attention, dtype=np.float64)
    gradient = np.asarray(gradient, dtype=np.float64)
    if attention.shape != gradient.shape or attention.ndim != 3:
        raise DimensionError(
            f"fuse_heads: attention {attention.shape} and gradient {gradient.shape} must agree"
        )
    if attention.shape[0] == 0:
        raise ContractError("fuse_heads: no heads")
    return np.maximum(gradient * attention, 0.0).mean(axis=0)


def scale_by_token_std(fused: np.ndarray, std: np.ndarray) -> np.ndarray:
    """Divide column j by std[j]."""
    fused = np.asarray(fused, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64).reshape(-1)
    if std.shape[0] != fused.shape[1]:
        raise DimensionError(f"std has {std.shape[0]} entries for {fused.shape[1]} columns")
    if np.any(std <= 0):
        raise ContractError("token std must be positive")
    return fused / std[None, :]


def sum_normalize(fused: np.ndarray, scope: str = "matrix") -> Tuple[np.ndarray, bool]:
    """
    Rescale to unit sum.

    Returns:
        Tuple of (matrix, degenerate); a matrix whose sum is at most 1e-12
        is returned unchanged with degenerate=True
    """
    fused = np.asarray(fused, dtype=np.float64)
    if scope == "matrix":
        total = fused.sum()
        if total <= DEGENERATE_SUM:
            return fused, True
        return fused / total, False
    if scope == "rows":
        sums = fused.sum(axis=1, keepdims=True)
        live = sums > DEGENERATE_SUM
        out = np.where(live, fused / np.where(live, sums, 1.0), fused)
        return out, not live.any()
    raise ConfigError(f"Unknown normalize scope: {scope}")


def block_update(relevance: np.ndarray, fused: np.ndarray) -> np.ndarray:
    """R + Ā·R."""
    relevance = np.asarray(relevance, dtype=np.float64)
    fused = np.asarray(fused, dtype=np.float64)
    if fused.ndim != 2 or fused.shape[0] != fused.shape[1] or fused.shape[1] != relevance.shape[0]:
        raise ContractError(f"block_update: Ā {fused.shape} does not conform to R {relevance.shape}")
    return relevance + fused @ relevance


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def block_factors(trace: ForwardTrace, stage: int, opts: AttributionOptions) -> List[np.ndarray]:
    """Processed Ā of every block of a stage, in execution order."""
    return [fused for _, fused, _ in _fused_blocks(trace, stage, opts)]


def _fused_blocks(
    trace: ForwardTrace, stage: int, opts: AttributionOptions
) -> List[Tuple[int, np.ndarray, bool]]:
    cfg = trace.config
    if not 0 <= stage < cfg.stage_count:
        raise ContractError(f"stage {stage} out of range for {cfg.stage_count} stage(s)")
    n = cfg.tokens(stage)
    out = []
    for record, stats in trace.stage_blocks(stage):
        attention, gradient = assemble_full_attention(record, n)
        if not opts.use_gradients:
            gradient = np.ones_like(attention)
        elif gradient is None:
            raise ContractError(f"block {record.block} has no attention gradient; run backward first")
        fused = fuse_heads(attention, gradient)
        if opts.use_std_scaling:
            fused = scale_by_token_std(fused, stats.std)
        degenerate = False
        if opts.use_sum_normalize:
            fused, degenerate = sum_normalize(fused, opts.normalize_scope)
        out.append((record.block, fused, degenerate))
    return out


def stage_relevance(trace: ForwardTrace, stage: int, opts: AttributionOptions) -> RelevanceMatrix:
    """Product of (I + Ā) over the blocks of one stage, newest block leftmost."""
    n = trace.config.tokens(stage)
    relevance = np.eye(n)
    degenerate = []
    for block, fused, flagged in _fused_blocks(trace, stage, opts):
        relevance = block_update(relevance, fused)
        if flagged:
            degenerate.append(block)
    return RelevanceMatrix(relevance, stage, stage, tuple(degenerate))


def merge_rows(
    relevance: np.ndarray, merge: Union[MergeMap, np.ndarray], reduce: str = "mean"
) -> np.ndarray:
    """
    Collapse the rows of each merge group into one row.

    Args:
        relevance: Matrix whose rows are fine tokens
        merge: MergeMap or an (n_groups, group_size) array of row ids
        reduce: 'mean' (average of the group rows) or 'max'
    """
    relevance = np.asarray(relevance, dtype=np.float64)
    groups = np.asarray(merge.groups if isinstance(merge, MergeMap) else merge)
    if groups.ndim != 2 or not np.array_equal(
        np.sort(groups.reshape(-1)), np.arange(relevance.shape[0])
    ):
        raise ContractError(f"merge groups do not partition {relevance.shape[0]} rows")
    stacked = relevance[groups]
    if reduce == "mean":
        return stacked.mean(axis=1)
    if reduce == "max":
        return stacked.max(axis=1)
    raise ConfigError(f"Unknown merge reduction: {reduce}")


def compose_stages(trace: ForwardTrace, opts: AttributionOptions) -> RelevanceMatrix:
    """
    Relevance of stage-j input tokens for last-stage output tokens.

    R starts as R^j; for every later stage i, R ← R^i · f(R).
    """
    cfg = trace.config
    j = opts.resolve_start(cfg.stage_count)
    first = stage_relevance(trace, j, opts)
    values = first.values
    degenerate = list(first.degenerate_blocks)
    for i in range(j + 1, cfg.stage_count):
        stage = stage_relevance(trace, i, opts)
        values = stage.values @ merge_rows(values, trace.merge_maps[i - 1], opts.merge_reduce)
        degenerate.extend(stage.degenerate_blocks)
    return RelevanceMatrix(values, cfg.stage_count - 1, j, tuple(degenerate))


# ---------------------------------------------------------------------------
# Readouts
# ---------------------------------------------------------------------------


def _square_side(n: int) -> int:
    side = math.isqrt(n)
    if side * side != n:
        raise ContractError(f"{n} tokens do not form a square grid")
    return side


def heatmap_swin(relevance: Union[RelevanceMatrix, np.ndarray]) -> np.ndarray:
    """Column sums of R on the square grid of its input tokens."""
    values = relevance.values if isinstance(relevance, RelevanceMatrix) else np.asarray(relevance)
    scores = values.sum(axis=0)
    side = _square_side(scores.shape[0])
    return scores.reshape(side, side)


def heatmap_vit(relevance: Union[RelevanceMatrix, np.ndarray]) -> np.ndarray:
    """CLS row of R without its CLS column, on the patch grid."""
    values = relevance.values if isinstance(relevance, RelevanceMatrix) else np.asarray(relevance)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise ContractError(f"heatmap_vit expects a square matrix, got {values.shape}")
    scores = values[0, 1:]
    side = _square_side(scores.shape[0])
    return scores.reshape(side, side).copy()


def _readout(trace: ForwardTrace, relevance: RelevanceMatrix) -> np.ndarray:
    if trace.config.variant == "vit":
        return heatmap_vit(relevance)
    return heatmap_swin(relevance)


def _is_flat(grid: np.ndarray) -> bool:
    grid = np.asarray(grid, dtype=np.float64)
    return bool(np.ptp(grid) <= 1e-12 * max(1.0, float(np.abs(grid).max())))


def attribute(trace: ForwardTrace, opts: AttributionOptions) -> Heatmap:
    """Full pipeline: compose stages, then the variant's readout."""
    relevance = compose_stages(trace, opts)
    grid = _readout(trace, relevance)
    if relevance.degenerate_blocks:
        logger.info("sum normalization guard fired for blocks %s", relevance.degenerate_blocks)
    return Heatmap(
        grid=grid, degenerate=_is_flat(grid), degenerate_blocks=relevance.degenerate_blocks
    )


def stage_heatmaps(trace: ForwardTrace, opts: AttributionOptions) -> List[np.ndarray]:
    """One heatmap per stage from that stage's R^i alone, each on its own grid."""
    return [
        _readout(trace, stage_relevance(trace, stage, opts))
        for stage in range(trace.config.stage_count)
    ]


def rollout_factors(trace: ForwardTrace) -> List[np.ndarray]:
    """(I + mean_h A) of every block, before row normalization."""
    factors = []
    for record in trace.records:
        n = trace.config.tokens(record.stage)
        attention, _ = assemble_full_attention(record, n)
        factors.append(np.eye(n) + attention.astype(np.float64).mean(axis=0))
    return factors


def rollout(trace: ForwardTrace) -> np.ndarray:
    """Attention rollout: product of row-normalized (I + mean_h A), CLS-row readout."""
    if trace.config.variant != "vit":
        raise UnsupportedVariantError("rollout is defined for single-stage ViT models only")
    n = trace.config.tokens(0)
    relevance = np.eye(n)
    for factor in rollout_factors(trace):
        relevance = (factor / factor.sum(axis=1, keepdims=True)) @ relevance
    return heatmap_vit(relevance)


def rollout_heatmap(trace: ForwardTrace) -> Heatmap:
    grid = rollout(trace)
    return Heatmap(grid=grid, degenerate=_is_flat(grid))


def upsample(grid: np.ndarray, height: int, width: int, method: str = "nearest") -> np.ndarray:
    """
    Resize a token grid to pixels and min-max normalize to [0, 1].

    A flat grid (including all-zero) maps to an all-zero pixel map.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if method not in UPSAMPLE_METHODS:
        raise ConfigError(f"Unknown upsample method: {method}")
    if _is_flat(grid):
        return np.zeros((height, width), dtype=np.float32)
    gh, gw = grid.shape
    if method == "nearest":
        if height % gh or width % gw:
            raise ContractError(f"nearest upsampling needs multiples of {gh}×{gw}, got {height}×{width}")
        up = np.repeat(np.repeat(grid, height // gh, axis=0), width // gw, axis=1)
    else:
        img = Image.fromarray(grid.astype(np.float32))
        up = np.asarray(img.resize((width, height), Image.Resampling.BILINEAR), dtype=np.float64)
    lo, hi = up.min(), up.max()
    return ((up - lo) / (hi - lo)).astype(np.float32)
