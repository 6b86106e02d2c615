"""Tests for perturbation curves, segmentation metrics and the synthetic dataset."""

import numpy as np
import pytest

from attnlens.errors import ContractError, DimensionError
from attnlens.evaluation import (
    FRACTIONS,
    PERTURBATION_COLUMNS,
    POLARITIES,
    SEGMENTATION_COLUMNS,
    LabeledSample,
    average_precision,
    binarize,
    evaluate_perturbation,
    evaluate_segmentation,
    make_synthetic_dataset,
    perturb_image,
    perturbation_curve,
    removal_order,
    seg_metrics,
    trapezoid_auc,
)


class QuadrantModel:
    """Predicts the quadrant with the largest pixel sum."""

    def predict(self, image):
        h, w = image.shape[:2]
        quadrants = [
            image[: h // 2, : w // 2],
            image[: h // 2, w // 2 :],
            image[h // 2 :, : w // 2],
            image[h // 2 :, w // 2 :],
        ]
        return int(np.argmax([q.sum() for q in quadrants]))


def _quadrant_samples():
    samples = []
    for label in range(4):
        image = np.zeros((16, 16, 1), dtype=np.float32)
        mask = np.zeros((16, 16), dtype=bool)
        top, left = (label // 2) * 8, (label % 2) * 8
        mask[top : top + 4, left : left + 4] = True
        image[mask] = 1.0
        samples.append(LabeledSample(image=image, label=label, mask=mask))
    return samples


def _mask_explainer(sample, target):
    return sample.mask.astype(np.float32)


class TestPerturbImage:
    def test_positive_and_negative(self):
        image = np.ones((2, 2, 1))
        pixel_map = np.array([[4.0, 3.0], [2.0, 1.0]])
        positive = perturb_image(image, pixel_map, 0.5, "positive")
        negative = perturb_image(image, pixel_map, 0.5, "negative")
        np.testing.assert_array_equal(positive[:, :, 0], [[0.0, 0.0], [1.0, 1.0]])
        np.testing.assert_array_equal(negative[:, :, 0], [[1.0, 1.0], [0.0, 0.0]])

    def test_ties_remove_lower_index_first(self):
        out = perturb_image(np.ones((2, 2, 1)), np.zeros((2, 2)), 0.25, "positive")
        np.testing.assert_array_equal(out[:, :, 0], [[0.0, 1.0], [1.0, 1.0]])

    def test_fill_value_and_count(self):
        out = perturb_image(np.ones((16, 16, 3)), np.arange(256.0).reshape(16, 16), 0.1, "positive", fill=0.5)
        assert np.sum(out[:, :, 0] == 0.5) == 26
        assert np.all(out[:, :, 0] == out[:, :, 2])

    def test_zero_fraction_is_a_copy(self):
        image = np.ones((2, 2, 1))
        out = perturb_image(image, np.zeros((2, 2)), 0.0, "negative")
        out[0, 0, 0] = 5.0
        assert image[0, 0, 0] == 1.0

    def test_invalid_arguments(self):
        with pytest.raises(ContractError):
            perturb_image(np.ones((2, 2, 1)), np.zeros((2, 2)), 1.0, "positive")
        with pytest.raises(DimensionError):
            perturb_image(np.ones((2, 2, 1)), np.zeros((3, 3)), 0.5, "positive")
        with pytest.raises(ContractError):
            removal_order(np.zeros((2, 2)), "sideways")


class TestAuc:
    @pytest.mark.parametrize(
        "curve, expected",
        [
            ([1.0] * 10, 0.9),
            ([1.0] * 5 + [0.0] * 5, 0.45),
            ([1.0 - f for f in FRACTIONS], 0.495),
        ],
    )
    def test_hand_computed_curves(self, curve, expected):
        assert trapezoid_auc(FRACTIONS, curve) == pytest.approx(expected, abs=1e-12)


class TestPerturbationCurve:
    def test_oracle_explainer_on_quadrant_model(self):
        model, samples = QuadrantModel(), _quadrant_samples()
        negative = perturbation_curve(model, samples, _mask_explainer, "negative", "top")
        positive = perturbation_curve(model, samples, _mask_explainer, "positive", "top")
        assert negative.accuracies == (1.0,) * 10
        assert negative.auc == pytest.approx(0.9)
        # once the rectangle is gone every image is blank and only label 0 survives
        assert positive.accuracies == (1.0,) + (0.25,) * 9
        assert positive.auc == pytest.approx(0.2625)

    def test_constant_model_gives_flat_curve(self):
        class Constant:
            def predict(self, image):
                return 1

        result = perturbation_curve(Constant(), _quadrant_samples(), _mask_explainer, "positive", "top")
        assert result.accuracies == (0.25,) * 10
        assert result.auc == pytest.approx(0.25 * 0.9)

    def test_explainer_runs_once_per_sample(self):
        calls = []

        def counting(sample, target):
            calls.append(target)
            return _mask_explainer(sample, target)

        perturbation_curve(QuadrantModel(), _quadrant_samples(), counting, "positive", "target")
        assert calls == [0, 1, 2, 3]

    def test_threads_do_not_change_results(self):
        model, samples = QuadrantModel(), _quadrant_samples()
        serial = perturbation_curve(model, samples, _mask_explainer, "positive", "top", threads=1)
        parallel = perturbation_curve(model, samples, _mask_explainer, "positive", "top", threads=3)
        assert serial == parallel

    def test_invalid_arguments(self):
        model, samples = QuadrantModel(), _quadrant_samples()
        with pytest.raises(ContractError):
            perturbation_curve(model, [], _mask_explainer, "positive", "top")
        with pytest.raises(ContractError):
            perturbation_curve(model, samples, _mask_explainer, "positive", "best")
        with pytest.raises(ContractError):
            perturbation_curve(model, samples, _mask_explainer, "positive", "top", fractions=(0.0, 0.0))

    def test_evaluate_perturbation_rows(self):
        calls = []

        def counting(sample, target):
            calls.append(target)
            return _mask_explainer(sample, target)

        rows = evaluate_perturbation(QuadrantModel(), _quadrant_samples(), {"oracle": counting})
        assert rows[0]["method"] == "oracle"
        assert set(rows[0]) == {"method", *PERTURBATION_COLUMNS.values()}
        assert rows[0]["Top Neg"] == pytest.approx(0.9)
        # predicted class equals the label, so the map is reused across all four curves
        assert len(calls) == 4


class TestPerturbationProperties:
    _ORDER = np.random.default_rng(0).permutation(256).reshape(16, 16).astype(np.float64)

    def _ranked(self, sample, target):
        # distinct integers: the mask on top, a fixed permutation below
        return self._ORDER + 256.0 * sample.mask

    @pytest.mark.parametrize(
        "rescale",
        [lambda m: 8.0 * m, lambda m: m**3, lambda m: m + 1000.0],
        ids=["scaled", "cubed", "shifted"],
    )
    @pytest.mark.parametrize("polarity", POLARITIES)
    def test_auc_ignores_monotone_rescaling(self, samples, rescale, polarity):
        model = QuadrantModel()
        base = perturbation_curve(model, samples, self._ranked, polarity, "target")
        rescaled = perturbation_curve(
            model, samples, lambda s, t: rescale(self._ranked(s, t)), polarity, "target"
        )
        assert rescaled == base

    @pytest.mark.parametrize("polarity", POLARITIES)
    @pytest.mark.parametrize("target_mode", ["top", "target"])
    def test_first_point_is_plain_accuracy(self, samples, polarity, target_mode):
        class Alternating:
            def predict(self, image):
                return int(image.sum() * 10) % 4

        model = Alternating()
        plain = np.mean([model.predict(s.image) == s.label for s in samples])
        result = perturbation_curve(model, samples, self._ranked, polarity, target_mode)
        assert result.accuracies[0] == plain


class TestSegmentation:
    @pytest.mark.parametrize("seed", range(10))
    def test_pixel_accuracy_is_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        scores = rng.random((6, 6))
        truth = rng.random((6, 6)) > 0.5
        truth[0, 0], truth[0, 1] = True, False
        predicted = binarize(scores)
        forward = seg_metrics(scores, truth)
        swapped = seg_metrics(truth.astype(np.float64), predicted)
        assert swapped.pixel_accuracy == forward.pixel_accuracy

    def test_oracle_map_scores_one(self):
        sample = _quadrant_samples()[2]
        metrics = seg_metrics(sample.mask.astype(float), sample.mask)
        assert metrics.as_row() == {"mIoU": 1.0, "mAP": 1.0, "Pixel Acc": 1.0, "mF1": 1.0}

    def test_average_precision(self):
        scores = np.array([0.9, 0.8, 0.7, 0.6])
        truth = np.array([True, False, True, False])
        assert average_precision(scores, truth) == pytest.approx((1.0 + 2.0 / 3.0) / 2.0)

    def test_hand_computed_metrics(self):
        scores = np.array([[0.9, 0.1], [0.8, 0.2]])
        truth = np.array([[True, True], [False, False]])
        metrics = seg_metrics(scores, truth)
        # prediction: left column; fg tp=1 fp=1 fn=1, bg the same
        assert metrics.miou == pytest.approx(1.0 / 3.0)
        assert metrics.mf1 == pytest.approx(0.5)
        assert metrics.pixel_accuracy == pytest.approx(0.5)

    def test_binarize_uses_mean(self):
        np.testing.assert_array_equal(binarize(np.array([0.0, 1.0, 2.0])), [False, False, True])
        np.testing.assert_array_equal(
            binarize(np.array([[0.0, 1.0], [1.0, 0.0]])), [[False, True], [True, False]]
        )
        np.testing.assert_array_equal(
            binarize(np.array([[0.1, 0.2], [0.3, 0.8]])), [[False, False], [False, True]]
        )
        assert not binarize(np.full((3, 3), 0.5)).any()

    def test_complement_prediction(self):
        truth = np.array([[True, False], [False, True]])
        metrics = seg_metrics((~truth).astype(float), truth)
        assert metrics.pixel_accuracy == 0.0
        assert metrics.miou == 0.0

    def test_average_precision_of_ranked_foreground(self):
        scores = np.array([[0.9, 0.8], [0.2, 0.1]])
        assert average_precision(scores, np.array([[True, True], [False, False]])) == 1.0
        # foreground at ranks 2 and 4
        truth = np.array([[False, True], [False, True]])
        assert average_precision(scores, truth) == pytest.approx((1.0 / 2.0 + 2.0 / 4.0) / 2.0)

    def test_degenerate_ground_truth(self):
        with pytest.raises(ContractError):
            seg_metrics(np.ones((2, 2)), np.zeros((2, 2), dtype=bool))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            seg_metrics(np.ones((2, 2)), np.ones((3, 3), dtype=bool))

    def test_evaluate_segmentation_rows(self):
        rows = evaluate_segmentation(QuadrantModel(), _quadrant_samples(), {"oracle": _mask_explainer})
        assert set(rows[0]) == {"method", *SEGMENTATION_COLUMNS}
        assert all(rows[0][c] == 1.0 for c in SEGMENTATION_COLUMNS)

    def test_evaluate_segmentation_needs_masks(self):
        samples = [LabeledSample(image=np.zeros((4, 4, 1)), label=0)]
        with pytest.raises(ContractError):
            evaluate_segmentation(QuadrantModel(), samples, {"oracle": _mask_explainer})


class TestSyntheticDataset:
    def test_deterministic(self):
        a, b = make_synthetic_dataset(1, 4), make_synthetic_dataset(1, 4)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.image, y.image)
            assert x.label == y.label

    def test_label_is_mask_quadrant(self, samples):
        for sample in samples:
            rows, cols = np.nonzero(sample.mask)
            assert (rows.min() // 8) * 2 + cols.min() // 8 == sample.label
            assert sample.image.shape == (16, 16, 1)
            assert np.all(sample.image[sample.mask] == 1.0)
            assert sample.image[~sample.mask].max() <= 0.1

    def test_zero_noise_background(self):
        for sample in make_synthetic_dataset(2, 3, noise=0.0):
            assert np.all(sample.image[~sample.mask] == 0.0)

    def test_invalid_size(self):
        with pytest.raises(ContractError):
            make_synthetic_dataset(0, 0)
        with pytest.raises(ContractError):
            make_synthetic_dataset(0, 2, size=7)

    def test_mask_shape_checked(self):
        with pytest.raises(DimensionError):
            LabeledSample(image=np.zeros((4, 4, 1)), label=0, mask=np.zeros((3, 3), dtype=bool))
