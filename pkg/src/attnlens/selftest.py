"""
Invariant suite behind `attnlens selftest`.

Every check compares a pipeline piece against an independent oracle
(finite differences, explicit matrices, brute-force enumeration) or a
property that must hold on random inputs, and reports a CheckResult.
"""

from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .attribution import (
    AttributionOptions,
    attribute,
    block_factors,
    compose_stages,
    merge_rows,
    rollout,
    rollout_factors,
    sum_normalize,
)
from .autodiff import finite_diff_grad, max_relative_error
from .demo import run_demo
from .evaluation import FRACTIONS, average_precision, seg_metrics, trapezoid_auc
from .models import (
    ForwardTrace,
    TransformerModel,
    assemble_full_attention,
    init_weights,
    merge_groups,
)

logger = logging.getLogger(__name__)

GRADIENT_TOLERANCE = 1e-4
ORACLE_TOLERANCE = 1e-6
WINDOW_TOLERANCE = 1e-5


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


@dataclass(frozen=True)
class SelftestSettings:
    """Trial counts of the randomized checks."""

    matrices: int = 1000
    rollout_instances: int = 100
    merge_trials: int = 100
    window_instances: int = 100
    nonneg_configs: int = 1000
    score_maps: int = 20
    seed: int = 0


def _image(model: TransformerModel, rng: np.random.Generator) -> np.ndarray:
    cfg = model.config
    return rng.random((cfg.image_size, cfg.image_size, cfg.channels))


def _with_grads(trace: ForwardTrace, make: Callable[[np.ndarray], np.ndarray]) -> ForwardTrace:
    records = tuple(replace(r, attention_grad=make(r.attention)) for r in trace.records)
    return replace(trace, records=records)


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------


def check_gradients(model: TransformerModel, image: np.ndarray) -> CheckResult:
    """Backward attention gradients against central differences, in float64."""
    start = time.perf_counter()
    _, trace = model.forward(image, dtype=np.float64)
    target = trace.predicted
    trace = model.backward_attention_grads(trace, target)
    worst = 0.0
    for record in trace.records:

        def logit(attention: np.ndarray, block: int = record.block) -> float:
            logits, _ = model.forward(image, np.float64, {block: attention})
            return float(logits[target])

        numeric = finite_diff_grad(logit, record.attention)
        worst = max(worst, max_relative_error(record.attention_grad, numeric))
    elapsed = time.perf_counter() - start
    return CheckResult(
        f"gradient fidelity ({model.config.variant})",
        worst < GRADIENT_TOLERANCE,
        f"max relative error {worst:.2e} in {elapsed:.1f}s",
    )


def check_sum_normalize(count: int, rng: np.random.Generator) -> CheckResult:
    worst = 0.0
    for _ in range(count):
        n = int(rng.integers(1, 12))
        out, degenerate = sum_normalize(rng.random((n, n)))
        if degenerate:
            return CheckResult("sum normalization", False, "random matrix flagged degenerate")
        worst = max(worst, abs(out.sum() - 1.0))
    zero, flagged = sum_normalize(np.zeros((4, 4)))
    ok = worst < ORACLE_TOLERANCE and flagged and np.all(zero == 0.0)
    return CheckResult("sum normalization", ok, f"max |sum - 1| {worst:.2e}, zero flagged {flagged}")


def check_rollout_equivalence(model: TransformerModel, count: int, seed: int) -> CheckResult:
    """Unit gradients without scaling reproduce the rollout factors block by block."""
    cfg = model.config
    opts = AttributionOptions(use_std_scaling=False, use_sum_normalize=False, use_gradients=False)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(count):
        candidate = TransformerModel(cfg, init_weights(cfg, seed + i))
        _, trace = candidate.forward(_image(candidate, rng))
        ours = [np.eye(f.shape[0]) + f for f in block_factors(trace, 0, opts)]
        for mine, theirs in zip(ours, rollout_factors(trace)):
            worst = max(worst, float(np.abs(mine - theirs).max()))
    return CheckResult(
        "rollout equivalence", worst < ORACLE_TOLERANCE, f"max abs diff {worst:.2e} over {count}"
    )


def check_merge(model: TransformerModel, count: int, rng: np.random.Generator) -> CheckResult:
    """Row merging against the explicit averaging matrix at every boundary."""
    cfg = model.config
    worst = 0.0
    for boundary in range(cfg.stage_count - 1):
        groups = merge_groups(cfg.grid_side(boundary))
        fine = cfg.tokens(boundary)
        averaging = np.zeros((groups.shape[0], fine))
        for g, members in enumerate(groups):
            averaging[g, members] = 0.25
        for _ in range(count):
            relevance = rng.random((fine, fine))
            worst = max(worst, float(np.abs(merge_rows(relevance, groups) - averaging @ relevance).max()))
    return CheckResult("merge oracle", worst < ORACLE_TOLERANCE, f"max abs diff {worst:.2e}")


def _brute_force_relevance(trace: ForwardTrace, opts: AttributionOptions) -> np.ndarray:
    cfg = trace.config
    relevance = None
    for stage in range(cfg.stage_count):
        n = cfg.tokens(stage)
        stage_r = np.eye(n)
        for record, stats in trace.stage_blocks(stage):
            heads = record.attention.shape[1]
            fused = np.zeros((n, n))
            for w, tokens in enumerate(record.window_map):
                for h in range(heads):
                    for a, i in enumerate(tokens):
                        for b, j in enumerate(tokens):
                            att = float(record.attention[w, h, a, b])
                            grad = float(record.attention_grad[w, h, a, b]) if opts.use_gradients else 1.0
                            fused[i, j] += max(att * grad, 0.0) / heads
            if opts.use_std_scaling:
                std = np.asarray(stats.std, dtype=np.float64).reshape(-1)
                for j in range(n):
                    fused[:, j] /= std[j]
            if opts.use_sum_normalize and fused.sum() > 1e-12:
                fused /= fused.sum()
            stage_r = (np.eye(n) + fused) @ stage_r
        if relevance is None:
            relevance = stage_r
        else:
            groups = trace.merge_maps[stage - 1].groups
            averaging = np.zeros((groups.shape[0], groups.size))
            for g, members in enumerate(groups):
                averaging[g, members] = 1.0 / len(members)
            relevance = stage_r @ averaging @ relevance
    return relevance


def check_composition(model: TransformerModel, image: np.ndarray) -> CheckResult:
    """compose_stages from stage 0 against an explicit chain, all 8 switch combinations."""
    trace = model.trace(image)
    worst = 0.0
    for std, norm, grads in itertools.product((True, False), repeat=3):
        opts = AttributionOptions(
            start_stage=0, use_std_scaling=std, use_sum_normalize=norm, use_gradients=grads
        )
        expected = _brute_force_relevance(trace, opts)
        actual = compose_stages(trace, opts).values
        scale = max(1.0, float(np.abs(expected).max()))
        worst = max(worst, float(np.abs(actual - expected).max()) / scale)
    return CheckResult("composition oracle", worst < ORACLE_TOLERANCE, f"max rel diff {worst:.2e}")


def check_window_assembly(model: TransformerModel, count: int, seed: int) -> CheckResult:
    """Dense attention times values reproduces the windowed context, shifted blocks included."""
    cfg = model.config
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(count):
        candidate = TransformerModel(cfg, init_weights(cfg, seed + i))
        _, trace = candidate.forward(_image(candidate, rng))
        for record in trace.records:
            n = cfg.tokens(record.stage)
            attention, _ = assemble_full_attention(record, n)
            dh = record.values.shape[1] // record.heads
            rebuilt = np.concatenate(
                [attention[h] @ record.values[:, h * dh : (h + 1) * dh] for h in range(record.heads)],
                axis=1,
            )
            worst = max(worst, float(np.abs(rebuilt - record.context).max()))
    return CheckResult(
        f"window assembly ({cfg.variant})", worst < WINDOW_TOLERANCE, f"max abs diff {worst:.2e}"
    )


def check_nonnegativity(
    models: Sequence[TransformerModel], count: int, rng: np.random.Generator
) -> CheckResult:
    """Relevance stays finite and nonnegative under random switches and gradients, zeros included."""
    traces = [m.trace(_image(m, rng)) for m in models for _ in range(3)]
    for i in range(count):
        trace = traces[i % len(traces)]
        mode = ("recorded", "zero", "random")[int(rng.integers(3))]
        if mode == "zero":
            trace = _with_grads(trace, np.zeros_like)
        elif mode == "random":
            trace = _with_grads(trace, lambda a: rng.normal(size=a.shape))
        stages = trace.config.stage_count
        opts = AttributionOptions(
            start_stage=int(rng.integers(stages)),
            use_std_scaling=bool(rng.integers(2)),
            use_sum_normalize=bool(rng.integers(2)),
            use_gradients=bool(rng.integers(2)),
            normalize_scope=("matrix", "rows")[int(rng.integers(2))],
            merge_reduce=("mean", "max")[int(rng.integers(2))],
        )
        values = compose_stages(trace, opts).values
        grid = attribute(trace, opts).grid
        if not (np.all(np.isfinite(values)) and np.all(values >= 0) and np.all(np.isfinite(grid))):
            return CheckResult("nonnegativity", False, f"{mode} gradients with {opts}")
        if trace.config.variant == "vit" and not np.all(np.isfinite(rollout(trace))):
            return CheckResult("nonnegativity", False, "rollout produced non-finite values")
    return CheckResult("nonnegativity", True, f"{count} configurations")


def _brute_force_seg(scores: np.ndarray, truth: np.ndarray) -> Dict[str, float]:
    s = scores.reshape(-1)
    t = truth.reshape(-1)
    n = s.size
    mean = sum(s) / n
    pred = [bool(v > mean) for v in s]

    rank = [1 + sum(1 for j in range(n) if s[j] > s[i] or (s[j] == s[i] and j < i)) for i in range(n)]
    positives = [i for i in range(n) if t[i]]
    precisions = []
    for i in positives:
        precisions.append(sum(1 for j in positives if rank[j] <= rank[i]) / rank[i])

    def scores_for(p: List[bool], g: List[bool]):
        tp = sum(1 for a, b in zip(p, g) if a and b)
        fp = sum(1 for a, b in zip(p, g) if a and not b)
        fn = sum(1 for a, b in zip(p, g) if not a and b)
        union = tp + fp + fn
        return (tp / union, 2 * tp / (2 * tp + fp + fn)) if union else (1.0, 1.0)

    gt = [bool(v) for v in t]
    fg = scores_for(pred, gt)
    bg = scores_for([not v for v in pred], [not v for v in gt])
    return {
        "mIoU": (fg[0] + bg[0]) / 2,
        "mAP": sum(precisions) / len(positives),
        "Pixel Acc": sum(1 for a, b in zip(pred, gt) if a == b) / n,
        "mF1": (fg[1] + bg[1]) / 2,
    }


def check_segmentation_oracle(count: int, rng: np.random.Generator) -> CheckResult:
    """seg_metrics against enumeration over every non-trivial 3×3 mask."""
    worst = 0.0
    for _ in range(count):
        # quantized scores so ties occur
        scores = rng.integers(0, 4, size=(3, 3)).astype(np.float64)
        for bits in range(1, 2**9 - 1):
            truth = np.array([(bits >> k) & 1 for k in range(9)], dtype=bool).reshape(3, 3)
            expected = _brute_force_seg(scores, truth)
            actual = seg_metrics(scores, truth).as_row()
            worst = max(worst, max(abs(actual[k] - expected[k]) for k in expected))
            worst = max(worst, abs(average_precision(scores, truth) - expected["mAP"]))
    return CheckResult("segmentation oracle", worst < 1e-12, f"max abs diff {worst:.2e}")


def check_auc_oracle() -> CheckResult:
    curves = [
        ([1.0] * 10, 0.9),
        ([1.0] * 5 + [0.0] * 5, 0.45),
        ([1.0 - f for f in FRACTIONS], 0.495),
    ]
    worst = max(abs(trapezoid_auc(FRACTIONS, curve) - expected) for curve, expected in curves)
    return CheckResult("perturbation AUC oracle", worst < 1e-12, f"max abs diff {worst:.2e}")


def check_demo() -> CheckResult:
    result = run_demo()
    return CheckResult(
        "corner collapse demo",
        result.passed,
        f"argmax with std {result.argmax_with_std}, without {result.argmax_without_std}, "
        f"oracle error {result.oracle_error:.2e}",
    )


# ---------------------------------------------------------------------------
# Suite
# ---------------------------------------------------------------------------


def run_selftest(
    vit: Optional[TransformerModel] = None,
    swin: Optional[TransformerModel] = None,
    settings: SelftestSettings = SelftestSettings(),
) -> List[CheckResult]:
    """
    Run every check; toy models seeded with settings.seed stand in for
    missing models.
    """
    vit = vit or TransformerModel.toy("vit", settings.seed)
    swin = swin or TransformerModel.toy("swin", settings.seed)
    rng = np.random.default_rng(settings.seed)
    s = settings

    checks: List[Callable[[], CheckResult]] = [
        lambda: check_gradients(vit, _image(vit, rng)),
        lambda: check_gradients(swin, _image(swin, rng)),
        lambda: check_sum_normalize(s.matrices, rng),
        lambda: check_rollout_equivalence(vit, s.rollout_instances, s.seed),
        lambda: check_merge(swin, s.merge_trials, rng),
        lambda: check_composition(swin, _image(swin, rng)),
        lambda: check_window_assembly(swin, s.window_instances, s.seed),
        lambda: check_nonnegativity([vit, swin], s.nonneg_configs, rng),
        lambda: check_segmentation_oracle(s.score_maps, rng),
        check_auc_oracle,
        check_demo,
    ]
    results = []
    for check in checks:
        result = check()
        logger.info("%s: %s (%s)", result.name, "ok" if result.passed else "FAILED", result.detail)
        results.append(result)
    return results
