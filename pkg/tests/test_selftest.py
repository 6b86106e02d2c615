"""Tests for the invariant suite and the corner-collapse demonstration."""

import numpy as np
import pytest

from attnlens.demo import CORNER_TOKEN, OBJECT_TOKEN, demo_model, run_demo
from attnlens.selftest import (
    SelftestSettings,
    check_auc_oracle,
    check_composition,
    check_merge,
    check_nonnegativity,
    check_rollout_equivalence,
    check_segmentation_oracle,
    check_sum_normalize,
    check_window_assembly,
    run_selftest,
)


class TestChecks:
    def test_sum_normalize(self, rng):
        assert check_sum_normalize(50, rng).passed

    def test_rollout_equivalence(self, vit_model):
        assert check_rollout_equivalence(vit_model, 3, seed=0).passed

    def test_merge(self, swin_model, rng):
        assert check_merge(swin_model, 5, rng).passed

    def test_composition(self, swin_model, toy_image):
        result = check_composition(swin_model, toy_image)
        assert result.passed, result.detail

    def test_window_assembly(self, swin_model):
        assert check_window_assembly(swin_model, 2, seed=1).passed

    def test_nonnegativity(self, vit_model, swin_model, rng):
        result = check_nonnegativity([vit_model, swin_model], 30, rng)
        assert result.passed, result.detail

    def test_segmentation_oracle(self, rng):
        assert check_segmentation_oracle(1, rng).passed

    def test_auc_oracle(self):
        assert check_auc_oracle().passed

    def test_suite_reports_every_check(self):
        settings = SelftestSettings(
            matrices=10,
            rollout_instances=1,
            merge_trials=1,
            window_instances=1,
            nonneg_configs=10,
            score_maps=1,
        )
        results = run_selftest(settings=settings)
        assert len(results) == 11
        assert all(r.passed for r in results), [r for r in results if not r.passed]


class TestDemo:
    def test_std_scaling_moves_argmax_to_object(self):
        result = run_demo()
        assert result.max_std_token == CORNER_TOKEN
        assert result.argmax_without_std == CORNER_TOKEN
        assert result.argmax_with_std == OBJECT_TOKEN
        assert result.oracle_error < 1e-4
        assert result.passed

    def test_model_predicts_explained_class(self):
        model, image = demo_model()
        assert image.shape == (4, 4, 1)
        assert model.predict(image) == 0

    def test_to_dict(self):
        report = run_demo().to_dict()
        assert report["object_token"] == OBJECT_TOKEN
        assert len(report["heatmap_with_std"]) == 4
        assert report["token_std"][0] == pytest.approx(np.sqrt(100.0**2 * 3 / 16 + 1e-5), rel=1e-4)
