"""
Perturbation and segmentation tests for saliency maps.

Perturbation: pixels are removed in relevance order (most relevant first for
positive polarity, least relevant first for negative) and classification
accuracy is tracked over the removed fraction; the area under that curve
summarises a method. Segmentation: the saliency map is thresholded at its
mean and compared against a ground-truth foreground mask.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, TypeVar

import numpy as np

from .errors import ContractError, DimensionError

logger = logging.getLogger(__name__)

FRACTIONS: Tuple[float, ...] = tuple(round(0.1 * i, 1) for i in range(10))
POLARITIES = ("positive", "negative")
TARGET_MODES = ("top", "target")

PERTURBATION_COLUMNS = {
    ("top", "negative"): "Top Neg",
    ("top", "positive"): "Top Pos",
    ("target", "negative"): "Target Neg",
    ("target", "positive"): "Target Pos",
}
SEGMENTATION_COLUMNS = ("mIoU", "mAP", "Pixel Acc", "mF1")

T = TypeVar("T")
R = TypeVar("R")


@dataclass(frozen=True)
class LabeledSample:
    image: np.ndarray
    label: int
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.mask is not None and self.mask.shape != self.image.shape[:2]:
            raise DimensionError(
                f"mask shape {self.mask.shape} does not match image {self.image.shape[:2]}"
            )


@dataclass(frozen=True)
class PerturbationResult:
    fractions: Tuple[float, ...]
    accuracies: Tuple[float, ...]
    auc: float


@dataclass(frozen=True)
class SegMetrics:
    miou: float
    mean_ap: float
    pixel_accuracy: float
    mf1: float

    def as_row(self) -> Dict[str, float]:
        return {
            "mIoU": self.miou,
            "mAP": self.mean_ap,
            "Pixel Acc": self.pixel_accuracy,
            "mF1": self.mf1,
        }


# (sample, class index) -> pixel map of the sample's spatial shape
Explainer = Callable[[LabeledSample, int], np.ndarray]


def _map(fn: Callable[[T], R], items: Sequence[T], threads: int) -> List[R]:
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Perturbation
# ---------------------------------------------------------------------------


def removal_order(pixel_map: np.ndarray, polarity: str) -> np.ndarray:
    """Flat pixel indices in removal order; ties go to the lower index."""
    scores = np.asarray(pixel_map, dtype=np.float64).reshape(-1)
    if polarity == "positive":
        return np.argsort(-scores, kind="stable")
    if polarity == "negative":
        return np.argsort(scores, kind="stable")
    raise ContractError(f"Unknown polarity: {polarity}")


def perturb_image(
    image: np.ndarray,
    pixel_map: np.ndarray,
    fraction: float,
    polarity: str,
    fill: float = 0.0,
) -> np.ndarray:
    """
    Replace the ⌈fraction·H·W⌉ most (positive) or least (negative) relevant
    pixels by fill, across all channels.
    """
    if not 0.0 <= fraction < 1.0:
        raise ContractError(f"fraction must be in [0, 1), got {fraction}")
    h, w = image.shape[:2]
    if np.shape(pixel_map) != (h, w):
        raise DimensionError(f"pixel map {np.shape(pixel_map)} does not match image {h}×{w}")
    out = np.array(image, copy=True)
    count = math.ceil(fraction * h * w - 1e-9)
    if count == 0:
        return out
    removed = removal_order(pixel_map, polarity)[:count]
    rows, cols = np.unravel_index(removed, (h, w))
    out[rows, cols] = fill
    return out


_trapezoid = getattr(np, "trapezoid", None) or np.trapz  # numpy < 2.0 only has trapz


def trapezoid_auc(fractions: Sequence[float], values: Sequence[float]) -> float:
    return float(
        _trapezoid(np.asarray(values, dtype=np.float64), np.asarray(fractions, dtype=np.float64))
    )


def perturbation_curve(
    model,
    dataset: Sequence[LabeledSample],
    explainer: Explainer,
    polarity: str,
    target_mode: str,
    fractions: Sequence[float] = FRACTIONS,
    fill: float = 0.0,
    threads: int = 1,
) -> PerturbationResult:
    """
    Accuracy against the ground-truth label as pixels are removed.

    Args:
        model: Anything with predict(image) -> class index
        dataset: Labeled samples
        explainer: Saliency for (sample, class); computed once per sample
        polarity: 'positive' or 'negative'
        target_mode: 'top' explains the predicted class, 'target' the label
        fractions: Strictly increasing removal fractions
        fill: Value written into removed pixels
        threads: Worker threads over samples
    """
    if not dataset:
        raise ContractError("perturbation_curve needs a non-empty dataset")
    if target_mode not in TARGET_MODES:
        raise ContractError(f"Unknown target mode: {target_mode}")
    if polarity not in POLARITIES:
        raise ContractError(f"Unknown polarity: {polarity}")
    fractions = tuple(float(f) for f in fractions)
    if any(b <= a for a, b in zip(fractions, fractions[1:])):
        raise ContractError("fractions must be strictly increasing")

    def run(sample: LabeledSample) -> List[bool]:
        predicted = model.predict(sample.image)
        target = predicted if target_mode == "top" else sample.label
        pixel_map = explainer(sample, target)
        hits = []
        for fraction in fractions:
            if fraction == 0.0:
                prediction = predicted
            else:
                prediction = model.predict(
                    perturb_image(sample.image, pixel_map, fraction, polarity, fill)
                )
            hits.append(prediction == sample.label)
        return hits

    hits = np.array(_map(run, list(dataset), threads), dtype=np.float64)
    accuracies = tuple(float(a) for a in hits.mean(axis=0))
    return PerturbationResult(fractions, accuracies, trapezoid_auc(fractions, accuracies))


# ---------------------------------------------------------------------------
# Segmentation
# ---------------------------------------------------------------------------


def binarize(pixel_map: np.ndarray) -> np.ndarray:
    """Foreground where the value exceeds the map's mean."""
    pixel_map = np.asarray(pixel_map, dtype=np.float64)
    return pixel_map > pixel_map.mean()


def average_precision(scores: np.ndarray, truth: np.ndarray) -> float:
    """Ranking AP of scores against a binary truth; ties ranked by pixel index."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64).reshape(-1), kind="stable")
    relevant = np.asarray(truth, dtype=bool).reshape(-1)[order]
    positives = relevant.sum()
    if positives == 0:
        raise ContractError("average precision needs at least one positive")
    precision = np.cumsum(relevant) / np.arange(1, relevant.size + 1)
    return float(precision[relevant].sum() / positives)


def _class_scores(pred: np.ndarray, truth: np.ndarray) -> Tuple[float, float]:
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    union = tp + fp + fn
    iou = tp / union if union else 1.0
    f1 = 2 * tp / (2 * tp + fp + fn) if union else 1.0
    return iou, f1


def seg_metrics(pixel_map: np.ndarray, gt: np.ndarray) -> SegMetrics:
    """mIoU and mF1 over foreground/background, mAP of raw scores, pixel accuracy."""
    truth = np.asarray(gt, dtype=bool)
    if np.shape(pixel_map) != truth.shape:
        raise DimensionError(f"pixel map {np.shape(pixel_map)} does not match mask {truth.shape}")
    if truth.all() or not truth.any():
        raise ContractError("ground truth needs at least one foreground and one background pixel")
    pred = binarize(pixel_map)
    fg_iou, fg_f1 = _class_scores(pred, truth)
    bg_iou, bg_f1 = _class_scores(~pred, ~truth)
    return SegMetrics(
        miou=(fg_iou + bg_iou) / 2.0,
        mean_ap=average_precision(pixel_map, truth),
        pixel_accuracy=float(np.mean(pred == truth)),
        mf1=(fg_f1 + bg_f1) / 2.0,
    )


# ---------------------------------------------------------------------------
# Dataset-level runs
# ---------------------------------------------------------------------------


class _CachedExplainer:
    """Memoizes an explainer per (sample, class) across curves of one method."""

    def __init__(self, explainer: Explainer):
        self.explainer = explainer
        self._cache: Dict[Tuple[int, int], np.ndarray] = {}

    def __call__(self, sample: LabeledSample, target: int) -> np.ndarray:
        key = (id(sample), int(target))
        if key not in self._cache:
            self._cache[key] = self.explainer(sample, target)
        return self._cache[key]


def evaluate_perturbation(
    model,
    dataset: Sequence[LabeledSample],
    methods: Mapping[str, Explainer],
    fractions: Sequence[float] = FRACTIONS,
    fill: float = 0.0,
    threads: int = 1,
) -> List[Dict[str, object]]:
    """One row per method with the AUC of each (mode, polarity) curve."""
    rows = []
    for name, explainer in methods.items():
        logger.info("perturbation test: %s", name)
        cached = _CachedExplainer(explainer)
        row: Dict[str, object] = {"method": name}
        for (mode, polarity), column in PERTURBATION_COLUMNS.items():
            result = perturbation_curve(
                model, dataset, cached, polarity, mode, fractions, fill, threads
            )
            row[column] = result.auc
        rows.append(row)
    return rows


def evaluate_segmentation(
    model,
    dataset: Sequence[LabeledSample],
    methods: Mapping[str, Explainer],
    threads: int = 1,
) -> List[Dict[str, object]]:
    """One row per method with segmentation metrics averaged over masked samples."""
    samples = [s for s in dataset if s.mask is not None]
    if not samples:
        raise ContractError("segmentation test needs samples with ground-truth masks")
    rows = []
    for name, explainer in methods.items():
        logger.info("segmentation test: %s", name)

        def run(sample: LabeledSample) -> Dict[str, float]:
            return seg_metrics(explainer(sample, model.predict(sample.image)), sample.mask).as_row()

        per_sample = _map(run, samples, threads)
        row: Dict[str, object] = {"method": name}
        for column in SEGMENTATION_COLUMNS:
            row[column] = float(np.mean([metrics[column] for metrics in per_sample]))
        rows.append(row)
    return rows


def make_synthetic_dataset(
    seed: int, n: int, size: int = 16, noise: float = 0.1, channels: int = 1
) -> List[LabeledSample]:
    """
    Bright rectangles on a noisy background.

    The label is the quadrant holding the rectangle (0 top-left, 1 top-right,
    2 bottom-left, 3 bottom-right) and the mask is the rectangle. Background
    pixels are uniform in [0, noise]; the rectangle is 1.0.
    """
    if n < 1:
        raise ContractError(f"dataset size must be >= 1, got {n}")
    if size < 4 or size % 2:
        raise ContractError(f"image size must be an even number >= 4, got {size}")
    rng = np.random.default_rng(seed)
    half = size // 2
    samples = []
    for _ in range(n):
        label = int(rng.integers(4))
        rh = int(rng.integers(max(1, half // 2), half + 1))
        rw = int(rng.integers(max(1, half // 2), half + 1))
        top = (label // 2) * half + int(rng.integers(0, half - rh + 1))
        left = (label % 2) * half + int(rng.integers(0, half - rw + 1))
        image = (noise * rng.random((size, size, channels))).astype(np.float32)
        image[top : top + rh, left : left + rw, :] = 1.0
        mask = np.zeros((size, size), dtype=bool)
        mask[top : top + rh, left : left + rw] = True
        samples.append(LabeledSample(image=image, label=label, mask=mask))
    return samples
