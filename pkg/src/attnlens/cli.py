"""
Command-line interface for attnlens.

Provides the attribute / eval / make-toy / selftest / demo commands.
"""

import logging
from pathlib import Path
from typing import Optional

import click

from . import __version__
from .config import METHOD_PRESETS, RunConfig, eval_threads
from .demo import run_demo
from .errors import AttnLensError
from .formats import write_json
from .models import TOY_CONFIGS
from .pipeline import EVAL_MODES, attribute_image, evaluate_dataset, load_model, make_toy
from .selftest import SelftestSettings, run_selftest


def _model_options(fn):
    fn = click.option(
        "--weights",
        type=click.Path(exists=True, dir_okay=False),
        required=True,
        help="Weight container produced by make-toy",
    )(fn)
    fn = click.option(
        "--config",
        "config_path",
        type=click.Path(exists=True, dir_okay=False),
        required=True,
        help="Model config JSON",
    )(fn)
    return fn


def _run_config(config_path, weights, **kwargs) -> RunConfig:
    return RunConfig(config_path=Path(config_path), weights_path=Path(weights), **kwargs)


@click.group()
@click.version_option(version=__version__)
@click.option("--verbose", "-v", is_flag=True, help="Log progress to stderr")
def cli(verbose: bool):
    """
    attnlens - attention relevance maps for toy ViT and Swin transformers

    Explain predictions with gradient-weighted attention, optionally
    rescaled by LayerNorm token statistics, and evaluate the maps with
    perturbation and segmentation tests.
    """
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )


@cli.command()
@_model_options
@click.option("--image", type=click.Path(exists=True, dir_okay=False), required=True, help="P5/P6 image")
@click.option(
    "--method",
    type=click.Choice(sorted(METHOD_PRESETS), case_sensitive=False),
    default="attn-ln",
    help="attn-ln: std scaling and normalization (default); attn: neither; rollout: baseline",
)
@click.option("--start-stage", type=int, default=None, help="First stage composed (default: last)")
@click.option("--no-gradients", is_flag=True, help="Use unit gradients")
@click.option("--no-std", is_flag=True, help="Skip token std scaling")
@click.option("--no-normalize", is_flag=True, help="Skip sum normalization")
@click.option("--target-class", default="predicted", help="Class index or 'predicted'")
@click.option(
    "--upsample",
    type=click.Choice(["nearest", "bilinear"], case_sensitive=False),
    default="nearest",
    help="Token grid to pixel resampling (default: nearest)",
)
@click.option(
    "--merge-reduce",
    type=click.Choice(["mean", "max"], case_sensitive=False),
    default="mean",
    help="Reduction over merged Swin tokens (default: mean)",
)
@click.option("--per-stage", is_flag=True, help="Also write one heatmap per stage")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="out", help="Output directory")
@click.option("--seed", type=int, default=0, help="Seed recorded with the run")
def attribute(
    config_path: str,
    weights: str,
    image: str,
    method: str,
    start_stage: Optional[int],
    no_gradients: bool,
    no_std: bool,
    no_normalize: bool,
    target_class: str,
    upsample: str,
    merge_reduce: str,
    per_stage: bool,
    out_dir: str,
    seed: int,
):
    """
    Write a relevance heatmap for one image.

    Examples:

        # Default method on the predicted class
        attnlens attribute --config toy/config.json --weights toy/weights.bin --image x.pgm

        # Plain gradient-weighted attention for class 2, bilinear upsampling
        attnlens attribute ... --method attn --target-class 2 --upsample bilinear
    """
    try:
        run = _run_config(
            config_path,
            weights,
            method=method.lower(),
            start_stage=start_stage,
            no_gradients=no_gradients,
            no_std=no_std,
            no_normalize=no_normalize,
            target=target_class,
            upsample=upsample.lower(),
            merge_reduce=merge_reduce.lower(),
            out_dir=Path(out_dir),
            seed=seed,
        )
        summary = attribute_image(run, image, per_stage=per_stage)
    except AttnLensError as e:
        click.echo(f"Error: {e}", err=True)
        raise click.Abort()

    click.echo(
        f"Predicted class {summary['predicted_class']}, explained class {summary['target_class']}"
    )
    if summary["degenerate"]:
        click.echo("Warning: heatmap is flat (degenerate)", err=True)
    click.echo(f"✓ Heatmap written to {out_dir}")


@cli.command(name="eval")
@_model_options
@click.option(
    "--dataset",
    type=click.Path(exists=True, file_okay=False),
    required=True,
    help="Directory with manifest.json",
)
@click.option(
    "--mode",
    type=click.Choice(EVAL_MODES, case_sensitive=False),
    default="perturbation",
    help="Evaluation test (default: perturbation)",
)
@click.option(
    "--upsample",
    type=click.Choice(["nearest", "bilinear"], case_sensitive=False),
    default="nearest",
)
@click.option("--merge-reduce", type=click.Choice(["mean", "max"], case_sensitive=False), default="mean")
@click.option("--include-oracle", is_flag=True, help="Add a row using the ground-truth mask as heatmap")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="out")
@click.option("--seed", type=int, default=0, help="Seed recorded with the run")
def eval_command(
    config_path: str,
    weights: str,
    dataset: str,
    mode: str,
    upsample: str,
    merge_reduce: str,
    include_oracle: bool,
    out_dir: str,
    seed: int,
):
    """
    Evaluate every method variant on a dataset.

    Writes eval_<mode>.csv and eval_<mode>.json. ATTNLENS_THREADS caps the
    number of worker threads.

    Example:

        attnlens eval --config toy/config.json --weights toy/weights.bin --dataset toy/dataset
    """
    try:
        run = _run_config(
            config_path,
            weights,
            upsample=upsample.lower(),
            merge_reduce=merge_reduce.lower(),
            out_dir=Path(out_dir),
            seed=seed,
        )
        rows = evaluate_dataset(
            run, dataset, mode.lower(), include_oracle=include_oracle, threads=eval_threads()
        )
    except AttnLensError as e:
        click.echo(f"Error: {e}", err=True)
        raise click.Abort()

    for row in rows:
        values = ", ".join(f"{k} {v:.4f}" for k, v in row.items() if k != "method")
        click.echo(f"  {row['method']}: {values}")
    click.echo(f"✓ Results written to {out_dir}")


@cli.command(name="make-toy")
@click.option(
    "--variant",
    type=click.Choice(sorted(TOY_CONFIGS), case_sensitive=False),
    default="vit",
    help="Toy architecture (default: vit)",
)
@click.option("--seed", type=int, default=0, help="Seed for weights and dataset")
@click.option("--samples", type=int, default=16, help="Synthetic dataset size")
@click.option("--noise", type=float, default=0.1, help="Background noise amplitude")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="toy")
def make_toy_command(variant: str, seed: int, samples: int, noise: float, out_dir: str):
    """
    Write a seeded toy model (config.json, weights.bin) and a synthetic dataset.

    Example:

        attnlens make-toy --variant swin --seed 3 --out toy_swin
    """
    try:
        paths = make_toy(variant.lower(), seed, out_dir, samples=samples, noise=noise)
    except AttnLensError as e:
        click.echo(f"Error: {e}", err=True)
        raise click.Abort()
    for label, path in paths.items():
        click.echo(f"  {label}: {path}")
    click.echo("✓ Toy model written")


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--weights", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--seed", type=int, default=0, help="Seed for toy models and random trials")
@click.option("--quick", is_flag=True, help="Run a tenth of the randomized trials")
def selftest(config_path: Optional[str], weights: Optional[str], seed: int, quick: bool):
    """
    Run the invariant suite; exits 1 when any check fails.

    A model given with --config/--weights replaces the toy model of its
    variant.
    """
    if (config_path is None) != (weights is None):
        click.echo("Error: --config and --weights must be given together", err=True)
        raise click.Abort()

    settings = SelftestSettings(seed=seed)
    if quick:
        settings = SelftestSettings(
            matrices=100,
            rollout_instances=10,
            merge_trials=10,
            window_instances=10,
            nonneg_configs=100,
            score_maps=2,
            seed=seed,
        )
    models = {}
    try:
        if config_path is not None:
            model = load_model(config_path, weights)
            models[model.config.variant] = model
        results = run_selftest(models.get("vit"), models.get("swin"), settings)
    except AttnLensError as e:
        click.echo(f"Error: {e}", err=True)
        raise click.Abort()

    for result in results:
        mark = "✓" if result.passed else "✗"
        click.echo(f"{mark} {result.name}: {result.detail}")
    failed = [r for r in results if not r.passed]
    if failed:
        click.echo(f"{len(failed)} of {len(results)} checks failed", err=True)
        raise SystemExit(1)
    click.echo(f"✓ All {len(results)} checks passed")


@cli.command()
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
def demo(out_dir: Optional[str]):
    """
    Show how token std scaling moves relevance off a high-norm corner token.
    """
    result = run_demo()
    click.echo(f"Largest-std token:          {result.max_std_token}")
    click.echo(f"Argmax without std scaling: {result.argmax_without_std}")
    click.echo(f"Argmax with std scaling:    {result.argmax_with_std}")
    click.echo(f"Oracle error:               {result.oracle_error:.2e}")
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "demo.json", result.to_dict())
    if not result.passed:
        click.echo("Demo expectations not met", err=True)
        raise SystemExit(1)


def main():
    """Entry point for CLI."""
    cli()


if __name__ == '__main__':
    main()
