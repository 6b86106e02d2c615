"""
End-to-end runs behind the CLI commands.

Orchestrates loading, attribution, evaluation and writing of artifacts.
"""

from __future__ import annotations

import logging
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Mapping, Union

import numpy as np

from .attribution import (
    AttributionOptions,
    Heatmap,
    attribute,
    rollout_heatmap,
    stage_heatmaps,
    upsample,
)
from .config import RunConfig
from .errors import ContractError, UnsupportedVariantError
from .evaluation import (
    PERTURBATION_COLUMNS,
    SEGMENTATION_COLUMNS,
    Explainer,
    LabeledSample,
    evaluate_perturbation,
    evaluate_segmentation,
    make_synthetic_dataset,
)
from .formats import (
    PathLike,
    load_config,
    load_dataset,
    load_image,
    load_weights,
    save_config,
    save_csv_matrix,
    save_dataset,
    save_heatmap,
    save_weights,
    write_csv,
    write_json,
)
from .models import TOY_CONFIGS, ModelConfig, TransformerModel, init_weights

logger = logging.getLogger(__name__)

ROLLOUT = "rollout"
ORACLE_ROW = "Ground Truth"
EVAL_MODES = ("perturbation", "segmentation")

MethodSpec = Union[AttributionOptions, str]


def load_model(config_path: PathLike, weights_path: PathLike) -> TransformerModel:
    logger.info("Loading model %s / %s", config_path, weights_path)
    cfg = load_config(config_path)
    return TransformerModel(cfg, load_weights(weights_path, cfg))


def explain(model: TransformerModel, image: np.ndarray, method: MethodSpec) -> Heatmap:
    """Heatmap for one image; AttributionOptions.target picks the class."""
    if method == ROLLOUT:
        if model.config.variant != "vit":
            raise UnsupportedVariantError("rollout is defined for single-stage ViT models only")
        _, trace = model.forward(image)
        return rollout_heatmap(trace)
    _, trace = model.forward(image)
    trace = model.backward_attention_grads(trace, method.resolve_target(trace.predicted))
    return attribute(trace, method)


def attribute_image(run: RunConfig, image_path: PathLike, per_stage: bool = False) -> Dict:
    """
    Write heatmap.pgm / heatmap.csv / grid.csv / summary.json into run.out_dir.

    Returns:
        The summary written to summary.json
    """
    if per_stage and run.is_rollout:
        raise ContractError("--per-stage is not available for rollout")
    model = load_model(run.config_path, run.weights_path)
    image = load_image(image_path)
    h, w = image.shape[:2]

    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    _, trace = model.forward(image)
    if run.is_rollout:
        method: MethodSpec = ROLLOUT
        target = trace.predicted
        if model.config.variant != "vit":
            raise UnsupportedVariantError("rollout is defined for single-stage ViT models only")
        heatmap = rollout_heatmap(trace)
    else:
        opts = run.attribution_options()
        target = opts.resolve_target(trace.predicted)
        logger.info("Attributing class %d (predicted %d)", target, trace.predicted)
        trace = model.backward_attention_grads(trace, target)
        heatmap = attribute(trace, opts)
        method = opts

    heatmap = heatmap.to_pixels(h, w, run.upsample)
    logger.info("Writing heatmaps to %s", out)
    save_heatmap(out / "heatmap", heatmap.pixels)
    save_csv_matrix(out / "grid.csv", heatmap.grid)

    if per_stage and method != ROLLOUT:
        for stage, grid in enumerate(stage_heatmaps(trace, method)):
            save_heatmap(out / f"heatmap_stage{stage}", upsample(grid, h, w, run.upsample))

    summary = {
        "variant": model.config.variant,
        "method": run.method,
        "seed": run.seed,
        "predicted_class": trace.predicted,
        "target_class": int(target),
        "degenerate": heatmap.degenerate,
        "degenerate_blocks": list(heatmap.degenerate_blocks),
        "logits": [float(v) for v in trace.logits],
        "grid_shape": list(heatmap.grid.shape),
    }
    write_json(out / "summary.json", summary)
    return summary


def make_explainer(model: TransformerModel, method: MethodSpec, upsample_method: str) -> Explainer:
    """Pixel-map explainer for evaluation; rollout ignores the requested class."""

    def explainer(sample: LabeledSample, target: int) -> np.ndarray:
        h, w = sample.image.shape[:2]
        spec = method if method == ROLLOUT else _with_target(method, target)
        return explain(model, sample.image, spec).to_pixels(h, w, upsample_method).pixels

    return explainer


def _with_target(opts: AttributionOptions, target: int) -> AttributionOptions:
    return replace(opts, target=int(target))


def method_variants(cfg: ModelConfig, merge_reduce: str = "mean") -> Dict[str, MethodSpec]:
    """
    Method rows of the evaluation tables.

    ViT: ours, plain gradient-weighted attention, rollout. Swin: ours from the
    last stage, plain attention from the last stage, and ours from an earlier
    start stage (stage 1 when there are more than two stages, else stage 0).
    """
    ours = AttributionOptions(merge_reduce=merge_reduce)
    plain = AttributionOptions(
        use_std_scaling=False, use_sum_normalize=False, merge_reduce=merge_reduce
    )
    if cfg.variant == "vit":
        return {"Attn Layer Norm(ours)": ours, "Attn": plain, "Rollout": ROLLOUT}
    early = 1 if cfg.stage_count > 2 else 0
    return {
        "Attn Layer Norm(ours)": ours,
        "Attn": plain,
        "Attn Layer Norm(Layer1)": AttributionOptions(start_stage=early, merge_reduce=merge_reduce),
    }


def _oracle_explainer(sample: LabeledSample, target: int) -> np.ndarray:
    if sample.mask is None:
        raise ContractError("the ground-truth row needs masks on every sample")
    return sample.mask.astype(np.float32)


def evaluate_dataset(
    run: RunConfig,
    dataset_dir: PathLike,
    mode: str,
    include_oracle: bool = False,
    threads: int = 1,
) -> List[Dict[str, object]]:
    """
    Run every method variant over a dataset; write eval_<mode>.csv / .json.

    Returns:
        One row per method
    """
    if mode not in EVAL_MODES:
        raise ContractError(f"Unknown eval mode: {mode}")
    model = load_model(run.config_path, run.weights_path)
    dataset = load_dataset(dataset_dir)
    logger.info("Evaluating %d samples (%s, %d thread(s))", len(dataset), mode, threads)

    methods: Dict[str, Explainer] = {
        name: make_explainer(model, spec, run.upsample)
        for name, spec in method_variants(model.config, run.merge_reduce).items()
    }
    if include_oracle:
        methods[ORACLE_ROW] = _oracle_explainer

    if mode == "perturbation":
        rows = evaluate_perturbation(model, dataset, methods, threads=threads)
        columns = ["method", *PERTURBATION_COLUMNS.values()]
    else:
        rows = evaluate_segmentation(model, dataset, methods, threads=threads)
        columns = ["method", *SEGMENTATION_COLUMNS]

    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / f"eval_{mode}.csv", rows, columns)
    write_json(
        out / f"eval_{mode}.json",
        {
            "mode": mode,
            "samples": len(dataset),
            "variant": model.config.variant,
            "seed": run.seed,
            "methods": [{c: row[c] for c in columns} for row in rows],
        },
    )
    return rows


def make_toy(
    variant: str,
    seed: int,
    out_dir: PathLike,
    samples: int = 16,
    noise: float = 0.1,
) -> Mapping[str, Path]:
    """Write config.json, weights.bin and a synthetic dataset/ for a toy model."""
    if variant not in TOY_CONFIGS:
        raise UnsupportedVariantError(f"Unknown variant: {variant}")
    cfg = TOY_CONFIGS[variant]()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    paths = {
        "config": out / "config.json",
        "weights": out / "weights.bin",
        "dataset": out / "dataset",
    }
    logger.info("Writing toy %s model (seed %d) to %s", variant, seed, out)
    save_config(paths["config"], cfg)
    save_weights(paths["weights"], init_weights(cfg, seed))
    save_dataset(
        paths["dataset"],
        make_synthetic_dataset(seed, samples, cfg.image_size, noise, cfg.channels),
    )
    return paths
