"""
Toy-scale ViT and Swin transformers on the autodiff Graph.

Both variants are pre-norm (LN -> MHSA -> residual, LN -> MLP -> residual).
A forward pass returns the class logits together with a ForwardTrace that
records, per block, the post-softmax attention of every window and head,
the pre-attention LayerNorm token std, and the window map; per stage
boundary it records the 2×2 merge groups.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from .autodiff import Graph
from .errors import ConfigError, ContractError, WeightError

logger = logging.getLogger(__name__)

VARIANTS = ("vit", "swin")


@dataclass(frozen=True)
class ModelConfig:
    """
    Architecture of a toy model.

    Args:
        variant: 'vit' (single stage, CLS token, full attention) or 'swin'
            (windowed attention, patch merging between stages)
        embed_dim: Token width of stage 0 (Swin doubles it at every merge)
        heads: Attention heads per block
        stage_depths: Blocks per stage; ViT has exactly one stage
        image_size: Square input side in pixels
        channels: Input channels
        patch_size: Side of the non-overlapping embedding patches
        window_side: Swin window side in tokens
        num_classes: Size of the classification head
        mlp_ratio: Hidden width of the MLP relative to the stage width
        ln_eps: LayerNorm epsilon
    """

    variant: str = "vit"
    embed_dim: int = 16
    heads: int = 2
    stage_depths: Tuple[int, ...] = (4,)
    image_size: int = 16
    channels: int = 1
    patch_size: int = 8
    window_side: int = 0
    num_classes: int = 4
    mlp_ratio: int = 2
    ln_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "stage_depths", tuple(int(d) for d in self.stage_depths))
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"Unknown variant: {self.variant} (expected one of {VARIANTS})")
        if self.embed_dim < 1 or self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} must be a positive multiple of heads {self.heads}"
            )
        if not self.stage_depths or min(self.stage_depths) < 1:
            raise ConfigError(f"stage_depths must be non-empty and positive: {self.stage_depths}")
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.channels < 1 or self.num_classes < 1 or self.mlp_ratio < 1:
            raise ConfigError("channels, num_classes and mlp_ratio must be positive")
        if self.ln_eps <= 0:
            raise ConfigError(f"ln_eps must be positive, got {self.ln_eps}")
        if self.variant == "vit":
            if len(self.stage_depths) != 1:
                raise ConfigError("ViT models have exactly one stage")
            return
        if self.window_side < 1:
            raise ConfigError("Swin models need window_side >= 1")
        side = self.image_size // self.patch_size
        for stage in range(self.stage_count):
            if stage > 0:
                if side % 2:
                    raise ConfigError(f"Stage {stage - 1} grid {side} cannot be merged 2×2")
                side //= 2
            if side % self.window(stage):
                raise ConfigError(
                    f"Stage {stage} grid {side} is not divisible by window_side {self.window_side}"
                )

    @property
    def stage_count(self) -> int:
        return len(self.stage_depths)

    @property
    def depth(self) -> int:
        return sum(self.stage_depths)

    def grid_side(self, stage: int) -> int:
        """Tokens per side of the patch grid at a stage (CLS excluded)."""
        return (self.image_size // self.patch_size) >> stage

    def tokens(self, stage: int) -> int:
        n = self.grid_side(stage) ** 2
        return n + 1 if self.variant == "vit" else n

    def stage_dim(self, stage: int) -> int:
        return self.embed_dim * (2**stage if self.variant == "swin" else 1)

    def window(self, stage: int) -> int:
        """Effective window side; a window never exceeds the stage grid."""
        return min(self.window_side, self.grid_side(stage))

    def shift(self, stage: int, index: int) -> int:
        """Cyclic shift of the index-th block within a stage (odd blocks, when windows tile)."""
        if self.variant != "swin" or index % 2 == 0:
            return 0
        window = self.window(stage)
        return window // 2 if window < self.grid_side(stage) else 0

    def blocks(self) -> Iterator[Tuple[int, int, int]]:
        """Yield (block index, stage, index within stage) in execution order."""
        block = 0
        for stage, depth in enumerate(self.stage_depths):
            for index in range(depth):
                yield block, stage, index
                block += 1

    def to_dict(self) -> Dict:
        return {
            "variant": self.variant,
            "embed_dim": self.embed_dim,
            "heads": self.heads,
            "stage_depths": list(self.stage_depths),
            "image_size": self.image_size,
            "channels": self.channels,
            "patch_size": self.patch_size,
            "window_side": self.window_side,
            "num_classes": self.num_classes,
            "mlp_ratio": self.mlp_ratio,
            "ln_eps": self.ln_eps,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        known = set(cls().to_dict())
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"Unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**dict(data))
        except TypeError as e:
            raise ConfigError(f"Invalid config: {e}") from e


def toy_vit_config() -> ModelConfig:
    """5 tokens (2×2 patches + CLS), 4 blocks, 2 heads, width 16."""
    return ModelConfig(variant="vit", embed_dim=16, heads=2, stage_depths=(4,), patch_size=8)


def toy_swin_config() -> ModelConfig:
    """16 tokens × 2 blocks, then 4 tokens × 2 blocks, 2×2 windows."""
    return ModelConfig(
        variant="swin", embed_dim=16, heads=2, stage_depths=(2, 2), patch_size=4, window_side=2
    )


TOY_CONFIGS = {
    "vit": toy_vit_config,
    "swin": toy_swin_config,
}


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------


def required_weight_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Every tensor the model reads, with its exact shape, in a stable order."""
    d0 = cfg.stage_dim(0)
    shapes: Dict[str, Tuple[int, ...]] = {
        "patch_embed.weight": (cfg.patch_size**2 * cfg.channels, d0),
        "patch_embed.bias": (d0,),
        "pos_embed": (cfg.tokens(0), d0),
    }
    if cfg.variant == "vit":
        shapes["cls_token"] = (1, d0)
    for block, stage, _ in cfg.blocks():
        d = cfg.stage_dim(stage)
        hidden = d * cfg.mlp_ratio
        pre = f"blocks.{block}."
        shapes.update(
            {
                pre + "norm1.weight": (d,),
                pre + "norm1.bias": (d,),
                pre + "attn.qkv.weight": (d, 3 * d),
                pre + "attn.qkv.bias": (3 * d,),
                pre + "attn.proj.weight": (d, d),
                pre + "attn.proj.bias": (d,),
                pre + "norm2.weight": (d,),
                pre + "norm2.bias": (d,),
                pre + "mlp.fc1.weight": (d, hidden),
                pre + "mlp.fc1.bias": (hidden,),
                pre + "mlp.fc2.weight": (hidden, d),
                pre + "mlp.fc2.bias": (d,),
            }
        )
    for boundary in range(cfg.stage_count - 1):
        d = cfg.stage_dim(boundary)
        shapes[f"merges.{boundary}.norm.weight"] = (4 * d,)
        shapes[f"merges.{boundary}.norm.bias"] = (4 * d,)
        shapes[f"merges.{boundary}.reduction.weight"] = (4 * d, 2 * d)
    d_last = cfg.stage_dim(cfg.stage_count - 1)
    shapes["norm.weight"] = (d_last,)
    shapes["norm.bias"] = (d_last,)
    shapes["head.weight"] = (d_last, cfg.num_classes)
    shapes["head.bias"] = (cfg.num_classes,)
    return shapes


def _is_norm_gain(name: str) -> bool:
    return name.endswith(".weight") and name.split(".")[-2].startswith("norm")


class WeightStore(Mapping[str, np.ndarray]):
    """Read-only map from tensor name to float32 array."""

    def __init__(self, tensors: Mapping[str, np.ndarray]):
        self._tensors = {
            name: np.ascontiguousarray(value, dtype=np.float32) for name, value in tensors.items()
        }

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def with_tensors(self, tensors: Mapping[str, np.ndarray]) -> "WeightStore":
        merged = dict(self._tensors)
        merged.update(tensors)
        return WeightStore(merged)

    def validate(self, cfg: ModelConfig) -> None:
        """Raise WeightError listing every missing, unknown or misshapen tensor."""
        expected = required_weight_shapes(cfg)
        problems = []
        missing = [name for name in expected if name not in self._tensors]
        if missing:
            problems.append(f"missing: {', '.join(missing)}")
        unknown = sorted(set(self._tensors) - set(expected))
        if unknown:
            problems.append(f"unknown: {', '.join(unknown)}")
        misshapen = [
            f"{name} {self._tensors[name].shape} != {shape}"
            for name, shape in expected.items()
            if name in self._tensors and self._tensors[name].shape != shape
        ]
        if misshapen:
            problems.append(f"misshapen: {'; '.join(misshapen)}")
        if problems:
            raise WeightError("Invalid weights (" + " | ".join(problems) + ")")


def init_weights(cfg: ModelConfig, seed: int = 0) -> WeightStore:
    """
    Seeded toy weights, uniform in [-0.05, 0.05].

    LayerNorm gains are centred on 1 instead of 0 so that normalized tokens
    keep unit scale.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in required_weight_shapes(cfg).items():
        w = rng.uniform(-0.05, 0.05, size=shape).astype(np.float32)
        if _is_norm_gain(name):
            w += np.float32(1.0)
        tensors[name] = w
    return WeightStore(tensors)


# ---------------------------------------------------------------------------
# Trace records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AttentionRecord:
    """
    Attention of one block.

    attention / attention_grad have shape (windows, heads, Nw, Nw);
    window_map[w, i] is the original token id sitting in slot i of window w.
    values and context are (N, d) in original token order: V and the
    attention output before the projection.
    """

    block: int
    stage: int
    attention: np.ndarray
    window_map: np.ndarray
    shift: int
    values: np.ndarray
    context: np.ndarray
    attention_grad: Optional[np.ndarray] = None
    nodes: Tuple[Tuple[int, ...], ...] = field(default=(), repr=False, compare=False)

    @property
    def heads(self) -> int:
        return self.attention.shape[1]


@dataclass(frozen=True)
class TokenStats:
    """Std per token from the LayerNorm that precedes a block's attention."""

    block: int
    std: np.ndarray


@dataclass(frozen=True)
class MergeMap:
    """groups[g] lists the four stage-i tokens merged into stage-(i+1) token g."""

    boundary: int
    groups: np.ndarray


@dataclass(frozen=True)
class ForwardTrace:
    config: ModelConfig
    records: Tuple[AttentionRecord, ...]
    token_stats: Tuple[TokenStats, ...]
    merge_maps: Tuple[MergeMap, ...]
    logits: np.ndarray
    predicted: int
    target_class: Optional[int] = None
    graph: Optional[Graph] = field(default=None, repr=False, compare=False)
    logits_node: int = field(default=-1, repr=False, compare=False)

    def stage_blocks(self, stage: int) -> List[Tuple[AttentionRecord, TokenStats]]:
        return [
            (record, stats)
            for record, stats in zip(self.records, self.token_stats)
            if record.stage == stage
        ]

    @property
    def has_gradients(self) -> bool:
        return all(record.attention_grad is not None for record in self.records)


# ---------------------------------------------------------------------------
# Token layout helpers
# ---------------------------------------------------------------------------


def window_partition(side: int, window: int, shift: int = 0) -> np.ndarray:
    """
    Token ids of each window after a cyclic shift of the grid.

    Returns:
        Array of shape (windows, window*window); rows in row-major window
        order, entries row-major within a window
    """
    if window < 1 or side % window:
        raise ContractError(f"Grid side {side} is not divisible by window {window}")
    ids = np.arange(side * side).reshape(side, side)
    if shift:
        ids = np.roll(ids, shift=(-shift, -shift), axis=(0, 1))
    n = side // window
    return ids.reshape(n, window, n, window).transpose(0, 2, 1, 3).reshape(n * n, window * window)


def merge_groups(side: int) -> np.ndarray:
    """Fine-token ids of each 2×2 patch, in coarse row-major order."""
    if side % 2:
        raise ContractError(f"Grid side {side} cannot be merged 2×2")
    ids = np.arange(side * side).reshape(side, side)
    parts = [ids[0::2, 0::2], ids[1::2, 0::2], ids[0::2, 1::2], ids[1::2, 1::2]]
    return np.stack(parts, axis=-1).reshape(-1, 4)


def _check_partition(window_map: np.ndarray, n: int) -> None:
    flat = np.sort(np.asarray(window_map).reshape(-1))
    if flat.shape != (n,) or not np.array_equal(flat, np.arange(n)):
        raise ContractError(f"window map does not cover tokens 0..{n - 1} exactly once")


def assemble_full_attention(
    record: AttentionRecord, n: int
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Scatter windowed attention into dense per-head N×N matrices.

    Indices are original token ids, so any cyclic shift is undone; entries
    between different windows are zero.

    Returns:
        Tuple of (attention, gradient), each of shape (heads, N, N); the
        gradient is None when the record has not been through backward
    """
    _check_partition(record.window_map, n)

    def scatter(windows: np.ndarray) -> np.ndarray:
        full = np.zeros((windows.shape[1], n, n), dtype=windows.dtype)
        for w, tokens in enumerate(record.window_map):
            full[:, tokens[:, None], tokens[None, :]] = windows[w]
        return full

    grad = None if record.attention_grad is None else scatter(record.attention_grad)
    return scatter(record.attention), grad


def predict(logits: np.ndarray) -> int:
    """Argmax; ties go to the lowest index."""
    return int(np.argmax(np.asarray(logits)))


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------


class _Params:
    """Weight tensors as graph constants, created on first use."""

    def __init__(self, graph: Graph, weights: Mapping[str, np.ndarray]):
        self.graph = graph
        self.weights = weights
        self._nodes: Dict[str, int] = {}

    def __getitem__(self, name: str) -> int:
        if name not in self._nodes:
            if name not in self.weights:
                raise WeightError(f"Invalid weights (missing: {name})")
            self._nodes[name] = self.graph.constant(self.weights[name])
        return self._nodes[name]


def _patchify(image: np.ndarray, patch: int) -> np.ndarray:
    h, w, c = image.shape
    grid = image.reshape(h // patch, patch, w // patch, patch, c).transpose(0, 2, 1, 3, 4)
    return grid.reshape((h // patch) * (w // patch), patch * patch * c)


def _as_image(image: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3:
        raise ConfigError(f"Expected an H×W×C image, got shape {image.shape}")
    h, w, c = image.shape
    if h % cfg.patch_size or w % cfg.patch_size:
        raise ConfigError(f"Image {h}×{w} is not divisible by patch_size {cfg.patch_size}")
    if (h, w, c) != (cfg.image_size, cfg.image_size, cfg.channels):
        raise ConfigError(
            f"Image shape {image.shape} does not match the model "
            f"({cfg.image_size}×{cfg.image_size}×{cfg.channels})"
        )
    return image


def _embed(g: Graph, p: _Params, image: np.ndarray, cfg: ModelConfig) -> int:
    patches = g.constant(_patchify(image, cfg.patch_size))
    x = g.add_bias(g.matmul(patches, p["patch_embed.weight"]), p["patch_embed.bias"])
    if cfg.variant == "vit":
        x = g.concat_rows([p["cls_token"], x])
    return g.add(x, p["pos_embed"])


def patch_embed(image: np.ndarray, cfg: ModelConfig, weights: Mapping[str, np.ndarray]) -> np.ndarray:
    """
    Linear projection of non-overlapping patches plus position embedding.

    Returns:
        Array of shape (N, embed_dim); ViT prepends the CLS token
    """
    g = Graph()
    return g.value(_embed(g, _Params(g, weights), _as_image(image, cfg), cfg)).copy()


def _block(
    g: Graph,
    p: _Params,
    x: int,
    cfg: ModelConfig,
    block: int,
    stage: int,
    index: int,
    override: Optional[np.ndarray],
) -> Tuple[int, AttentionRecord, TokenStats]:
    pre = f"blocks.{block}."
    h, stats = g.layer_norm(x, p[pre + "norm1.weight"], p[pre + "norm1.bias"], cfg.ln_eps)
    qkv = g.add_bias(g.matmul(h, p[pre + "attn.qkv.weight"]), p[pre + "attn.qkv.bias"])

    n = g.shape(x)[0]
    shift = cfg.shift(stage, index)
    if cfg.variant == "vit":
        window_map = np.arange(n)[None, :]
    else:
        window_map = window_partition(cfg.grid_side(stage), cfg.window(stage), shift)
    _check_partition(window_map, n)

    d = cfg.stage_dim(stage)
    dh = d // cfg.heads
    windows, slots = window_map.shape
    if override is not None:
        override = np.asarray(override)
        if override.shape != (windows, cfg.heads, slots, slots):
            raise ContractError(
                f"attention override for block {block} has shape {override.shape}, "
                f"expected {(windows, cfg.heads, slots, slots)}"
            )

    window_outs = []
    node_ids = []
    for w, tokens in enumerate(window_map):
        rows = g.gather_rows(qkv, tokens)
        head_outs = []
        ids = []
        for hd in range(cfg.heads):
            q = g.slice_cols(rows, hd * dh, (hd + 1) * dh)
            k = g.slice_cols(rows, d + hd * dh, d + (hd + 1) * dh)
            v = g.slice_cols(rows, 2 * d + hd * dh, 2 * d + (hd + 1) * dh)
            scores = g.scale(g.matmul(q, g.transpose(k)), dh**-0.5)
            a = g.softmax_lastdim(scores)
            if override is not None:
                a = g.constant(override[w, hd])
            ids.append(g.mark(a))
            head_outs.append(g.matmul(a, v))
        node_ids.append(tuple(ids))
        window_outs.append(g.concat_cols(head_outs))

    # back to original token order
    inverse = np.argsort(window_map.reshape(-1))
    context = g.gather_rows(g.concat_rows(window_outs), inverse)
    attn_out = g.add_bias(g.matmul(context, p[pre + "attn.proj.weight"]), p[pre + "attn.proj.bias"])
    x = g.elementwise("add", x, attn_out)

    h2, _ = g.layer_norm(x, p[pre + "norm2.weight"], p[pre + "norm2.bias"], cfg.ln_eps)
    m = g.add_bias(g.matmul(h2, p[pre + "mlp.fc1.weight"]), p[pre + "mlp.fc1.bias"])
    m = g.elementwise("gelu", m)
    m = g.add_bias(g.matmul(m, p[pre + "mlp.fc2.weight"]), p[pre + "mlp.fc2.bias"])
    x = g.elementwise("add", x, m)

    record = AttentionRecord(
        block=block,
        stage=stage,
        attention=np.stack([[g.value(a) for a in ids] for ids in node_ids]),
        window_map=window_map,
        shift=shift,
        values=g.value(qkv)[:, 2 * d : 3 * d].copy(),
        context=g.value(context).copy(),
        nodes=tuple(node_ids),
    )
    return x, record, TokenStats(block=block, std=stats.std.copy())


def _merge(g: Graph, p: _Params, x: int, cfg: ModelConfig, boundary: int) -> Tuple[int, MergeMap]:
    groups = merge_groups(cfg.grid_side(boundary))
    parts = [g.gather_rows(x, groups[:, k]) for k in range(4)]
    pre = f"merges.{boundary}."
    h, _ = g.layer_norm(
        g.concat_cols(parts), p[pre + "norm.weight"], p[pre + "norm.bias"], cfg.ln_eps
    )
    return g.matmul(h, p[pre + "reduction.weight"]), MergeMap(boundary=boundary, groups=groups)


def forward(
    cfg: ModelConfig,
    weights: Mapping[str, np.ndarray],
    image: np.ndarray,
    dtype=np.float32,
    attention_override: Optional[Mapping[int, np.ndarray]] = None,
) -> Tuple[np.ndarray, ForwardTrace]:
    """
    Run the model and record everything attribution needs.

    Args:
        cfg: Model configuration
        weights: Complete weight map (validated here)
        image: Array of shape (H, W, C) or (H, W)
        dtype: Graph precision; float64 is used by gradient oracles
        attention_override: Optional {block: attention} replacing the softmax
            output of those blocks by constants of shape (windows, heads, Nw, Nw)

    Returns:
        Tuple of (logits, trace); attention gradients are not yet filled
    """
    if not isinstance(weights, WeightStore):
        weights = WeightStore(weights)
    weights.validate(cfg)
    image = _as_image(image, cfg)

    g = Graph(dtype=dtype)
    p = _Params(g, weights)
    x = _embed(g, p, image, cfg)

    records: List[AttentionRecord] = []
    stats: List[TokenStats] = []
    merges: List[MergeMap] = []
    for block, stage, index in cfg.blocks():
        if index == 0 and stage > 0:
            x, merge_map = _merge(g, p, x, cfg, stage - 1)
            merges.append(merge_map)
        override = attention_override.get(block) if attention_override else None
        x, record, token_stats = _block(g, p, x, cfg, block, stage, index, override)
        records.append(record)
        stats.append(token_stats)

    h, _ = g.layer_norm(x, p["norm.weight"], p["norm.bias"], cfg.ln_eps)
    pooled = g.gather_rows(h, [0]) if cfg.variant == "vit" else g.mean_rows(h)
    logits_node = g.add_bias(g.matmul(pooled, p["head.weight"]), p["head.bias"])
    logits = g.value(logits_node)[0].copy()
    logger.debug("forward: %s, %d nodes, logits %s", cfg.variant, len(g), logits)

    trace = ForwardTrace(
        config=cfg,
        records=tuple(records),
        token_stats=tuple(stats),
        merge_maps=tuple(merges),
        logits=logits,
        predicted=predict(logits),
        graph=g,
        logits_node=logits_node,
    )
    return logits, trace


def backward_attention_grads(trace: ForwardTrace, class_index: int) -> ForwardTrace:
    """
    Fill every record's attention_grad with d logits[class_index] / dA.

    Returns:
        A new trace; the input trace is left without gradients
    """
    cfg = trace.config
    if not 0 <= class_index < cfg.num_classes:
        raise ContractError(f"class index {class_index} out of range [0, {cfg.num_classes})")
    if trace.graph is None:
        raise ContractError("trace has no graph; run forward() first")
    g = trace.graph
    grads = g.backward(g.pick(trace.logits_node, class_index))
    records = tuple(
        replace(
            record,
            attention_grad=np.stack([[grads[a] for a in ids] for ids in record.nodes]),
        )
        for record in trace.records
    )
    return replace(trace, records=records, target_class=class_index)


@dataclass(frozen=True)
class TransformerModel:
    """Immutable pairing of a config and validated weights."""

    config: ModelConfig
    weights: WeightStore

    def __post_init__(self):
        if not isinstance(self.weights, WeightStore):
            object.__setattr__(self, "weights", WeightStore(self.weights))
        self.weights.validate(self.config)

    @classmethod
    def toy(cls, variant: str, seed: int = 0) -> "TransformerModel":
        if variant not in TOY_CONFIGS:
            raise ConfigError(f"Unknown variant: {variant}")
        cfg = TOY_CONFIGS[variant]()
        return cls(cfg, init_weights(cfg, seed))

    def forward(
        self,
        image: np.ndarray,
        dtype=np.float32,
        attention_override: Optional[Mapping[int, np.ndarray]] = None,
    ) -> Tuple[np.ndarray, ForwardTrace]:
        return forward(self.config, self.weights, image, dtype, attention_override)

    def backward_attention_grads(self, trace: ForwardTrace, class_index: int) -> ForwardTrace:
        return backward_attention_grads(trace, class_index)

    def predict(self, image: np.ndarray) -> int:
        logits, _ = self.forward(image)
        return predict(logits)

    def trace(self, image: np.ndarray, class_index: Optional[int] = None) -> ForwardTrace:
        """Forward then backward for class_index (the predicted class when None)."""
        _, trace = self.forward(image)
        target = trace.predicted if class_index is None else class_index
        return backward_attention_grads(trace, target)
