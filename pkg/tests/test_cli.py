"""End-to-end tests of the attnlens command line."""

import json

import numpy as np
import pytest
from click.testing import CliRunner

from attnlens import __version__
from attnlens.cli import cli
from attnlens.formats import load_heatmap_csv


@pytest.fixture
def runner():
    return CliRunner()


def _make_toy(runner, tmp_path, variant):
    out = tmp_path / f"toy_{variant}"
    result = runner.invoke(
        cli, ["make-toy", "--variant", variant, "--seed", "1", "--samples", "4", "--out", str(out)]
    )
    assert result.exit_code == 0, result.output
    return out


@pytest.fixture
def vit_toy(runner, tmp_path):
    return _make_toy(runner, tmp_path, "vit")


@pytest.fixture
def swin_toy(runner, tmp_path):
    return _make_toy(runner, tmp_path, "swin")


def _model_args(toy):
    return ["--config", str(toy / "config.json"), "--weights", str(toy / "weights.bin")]


def _attribute(runner, toy, out, *extra):
    args = ["attribute", *_model_args(toy), "--image", str(toy / "dataset" / "sample_000.pgm")]
    return runner.invoke(cli, [*args, "--out", str(out), *extra])


class TestMakeToy:
    def test_writes_model_and_dataset(self, vit_toy):
        assert (vit_toy / "config.json").exists()
        assert (vit_toy / "weights.bin").exists()
        manifest = json.loads((vit_toy / "dataset" / "manifest.json").read_text())
        assert len(manifest["samples"]) == 4
        assert manifest["samples"][0]["mask"] == "sample_000_mask.pgm"

    def test_same_seed_same_bytes(self, runner, tmp_path, vit_toy):
        again = tmp_path / "again"
        runner.invoke(cli, ["make-toy", "--variant", "vit", "--seed", "1", "--samples", "4", "--out", str(again)])
        assert (again / "weights.bin").read_bytes() == (vit_toy / "weights.bin").read_bytes()


class TestAttribute:
    def test_outputs_are_deterministic(self, runner, tmp_path, swin_toy):
        for name in ("a", "b"):
            result = _attribute(runner, swin_toy, tmp_path / name)
            assert result.exit_code == 0, result.output
            assert "✓" in result.output
        for artifact in ("heatmap.pgm", "heatmap.csv", "grid.csv", "summary.json"):
            assert (tmp_path / "a" / artifact).read_bytes() == (tmp_path / "b" / artifact).read_bytes()

    def test_summary_contents(self, runner, tmp_path, vit_toy):
        result = _attribute(runner, vit_toy, tmp_path / "out", "--target-class", "2")
        assert result.exit_code == 0, result.output
        summary = json.loads((tmp_path / "out" / "summary.json").read_text())
        assert summary["variant"] == "vit"
        assert summary["method"] == "attn-ln"
        assert summary["target_class"] == 2
        assert summary["seed"] == 0
        assert len(summary["logits"]) == 4
        assert summary["grid_shape"] == [2, 2]
        assert load_heatmap_csv(tmp_path / "out" / "heatmap.csv").shape == (16, 16)

    def test_per_stage_and_start_stage(self, runner, tmp_path, swin_toy):
        out = tmp_path / "out"
        result = _attribute(runner, swin_toy, out, "--start-stage", "0", "--per-stage")
        assert result.exit_code == 0, result.output
        assert json.loads((out / "summary.json").read_text())["grid_shape"] == [4, 4]
        assert (out / "heatmap_stage0.pgm").exists()
        assert (out / "heatmap_stage1.csv").exists()

    def test_start_stage_out_of_range(self, runner, tmp_path, swin_toy):
        result = _attribute(runner, swin_toy, tmp_path / "out", "--start-stage", "2")
        assert result.exit_code != 0
        assert "Error" in result.output

    def test_bad_target_class(self, runner, tmp_path, vit_toy):
        result = _attribute(runner, vit_toy, tmp_path / "out", "--target-class", "cat")
        assert result.exit_code != 0

    def test_unit_gradient_chain_matches_rollout(self, runner, tmp_path, vit_toy):
        plain = _attribute(
            runner, vit_toy, tmp_path / "plain", "--no-gradients", "--no-std", "--no-normalize"
        )
        baseline = _attribute(runner, vit_toy, tmp_path / "rollout", "--method", "rollout")
        assert plain.exit_code == 0 and baseline.exit_code == 0
        ours = load_heatmap_csv(tmp_path / "plain" / "grid.csv")
        theirs = load_heatmap_csv(tmp_path / "rollout" / "grid.csv")
        np.testing.assert_allclose(theirs, ours / 2**4, rtol=1e-5)
        np.testing.assert_allclose(
            load_heatmap_csv(tmp_path / "plain" / "heatmap.csv"),
            load_heatmap_csv(tmp_path / "rollout" / "heatmap.csv"),
            atol=1e-5,
        )

    def test_seed_is_recorded(self, runner, tmp_path, vit_toy):
        result = _attribute(runner, vit_toy, tmp_path / "out", "--seed", "9")
        assert result.exit_code == 0, result.output
        assert json.loads((tmp_path / "out" / "summary.json").read_text())["seed"] == 9

    def test_per_stage_rollout_writes_nothing(self, runner, tmp_path, vit_toy):
        out = tmp_path / "out"
        result = _attribute(runner, vit_toy, out, "--method", "rollout", "--per-stage")
        assert result.exit_code != 0
        assert "per-stage" in result.output
        assert not (out / "heatmap.pgm").exists()
        assert not (out / "grid.csv").exists()

    def test_rollout_needs_vit(self, runner, tmp_path, swin_toy):
        result = _attribute(runner, swin_toy, tmp_path / "out", "--method", "rollout")
        assert result.exit_code != 0
        assert "rollout" in result.output


class TestEval:
    def _eval(self, runner, toy, out, *extra):
        args = ["eval", *_model_args(toy), "--dataset", str(toy / "dataset"), "--out", str(out)]
        return runner.invoke(cli, [*args, *extra])

    def test_threads_do_not_change_results(self, runner, tmp_path, vit_toy, monkeypatch):
        monkeypatch.setenv("ATTNLENS_THREADS", "1")
        first = self._eval(runner, vit_toy, tmp_path / "one")
        monkeypatch.setenv("ATTNLENS_THREADS", "3")
        second = self._eval(runner, vit_toy, tmp_path / "three")
        assert first.exit_code == 0, first.output
        assert second.exit_code == 0, second.output
        one = (tmp_path / "one" / "eval_perturbation.csv").read_text()
        assert one == (tmp_path / "three" / "eval_perturbation.csv").read_text()
        assert one.splitlines()[0] == "method,Top Neg,Top Pos,Target Neg,Target Pos"
        methods = [line.split(",")[0] for line in one.splitlines()[1:]]
        assert methods == ["Attn Layer Norm(ours)", "Attn", "Rollout"]

    def test_segmentation_with_oracle_row(self, runner, tmp_path, swin_toy):
        result = self._eval(runner, swin_toy, tmp_path / "out", "--mode", "segmentation", "--include-oracle")
        assert result.exit_code == 0, result.output
        report = json.loads((tmp_path / "out" / "eval_segmentation.json").read_text())
        assert report["samples"] == 4
        assert [row["method"] for row in report["methods"]] == [
            "Attn Layer Norm(ours)",
            "Attn",
            "Attn Layer Norm(Layer1)",
            "Ground Truth",
        ]
        assert report["methods"][-1] == {
            "method": "Ground Truth",
            "mIoU": 1.0,
            "mAP": 1.0,
            "Pixel Acc": 1.0,
            "mF1": 1.0,
        }

    def test_seed_is_recorded(self, runner, tmp_path, vit_toy):
        result = self._eval(runner, vit_toy, tmp_path / "out", "--seed", "11")
        assert result.exit_code == 0, result.output
        report = json.loads((tmp_path / "out" / "eval_perturbation.json").read_text())
        assert report["seed"] == 11
        assert report["methods"][0]["method"] == "Attn Layer Norm(ours)"

    def test_bad_thread_count(self, runner, tmp_path, vit_toy, monkeypatch):
        monkeypatch.setenv("ATTNLENS_THREADS", "zero")
        result = self._eval(runner, vit_toy, tmp_path / "out")
        assert result.exit_code != 0
        assert "ATTNLENS_THREADS" in result.output


class TestSelftestAndDemo:
    def test_quick_selftest_passes(self, runner):
        result = runner.invoke(cli, ["selftest", "--quick"])
        assert result.exit_code == 0, result.output
        assert "✗" not in result.output

    def test_selftest_with_model_from_disk(self, runner, swin_toy):
        result = runner.invoke(cli, ["selftest", "--quick", *_model_args(swin_toy)])
        assert result.exit_code == 0, result.output

    def test_selftest_needs_both_model_files(self, runner, vit_toy):
        result = runner.invoke(cli, ["selftest", "--config", str(vit_toy / "config.json")])
        assert result.exit_code != 0

    def test_demo(self, runner, tmp_path):
        result = runner.invoke(cli, ["demo", "--out", str(tmp_path)])
        assert result.exit_code == 0, result.output
        report = json.loads((tmp_path / "demo.json").read_text())
        assert report["passed"]
        assert report["argmax_with_std"] == 3
        assert report["argmax_without_std"] == 0

    def test_version(self, runner):
        result = runner.invoke(cli, ["--version"])
        assert __version__ in result.output
