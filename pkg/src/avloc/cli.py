"""Command-line entry points.

Exit codes: 0 on success, 2 for usage/validation problems, 1 for runtime
failures (I/O, divergence, missing media).
"""

from __future__ import annotations

import functools
import sys
from pathlib import Path

import click

from . import metrics as metrics_mod
from . import train as train_mod
from . import visualize as visualize_mod
from .config import MODES, build_configs
from .errors import ValidationError
from .ingest import FixtureConfig, ingest_corpus, make_fixture_dataset, read_manifest


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ValidationError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
        except click.ClickException:
            raise
        except Exception as exc:  # noqa: BLE001 - uniform runtime exit code
            click.echo(f"runtime failure: {exc}", err=True)
            sys.exit(1)

    return wrapper


def _config_options(fn):
    opts = [
        click.option("--config", "config_file", type=click.Path(path_type=Path), default=None,
                     help="Key-value config file; flags override it."),
        click.option("--batch-size", type=int, default=None),
        click.option("--base-lr", type=float, default=None),
        click.option("--ssl-head-lr", type=float, default=None),
        click.option("--steps", type=int, default=None),
        click.option("--seed", type=int, default=None),
        click.option("--mode", type=click.Choice(MODES), default=None),
        click.option("--pcm/--no-pcm", "pcm_enabled", default=None),
        click.option("--labeled-fraction", type=float, default=None),
        click.option("--class-labels/--no-class-labels", "use_class_labels", default=None),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _build(config_file, **flags):
    overrides = {
        "batch_size": flags.get("batch_size"),
        "base_lr": flags.get("base_lr"),
        "ssl_head_lr": flags.get("ssl_head_lr"),
        "steps": flags.get("steps"),
        "seed": flags.get("seed"),
        "mode": flags.get("mode"),
        "pcm_enabled": flags.get("pcm_enabled"),
        "labeled_fraction": flags.get("labeled_fraction"),
        "use_class_labels": flags.get("use_class_labels"),
    }
    return build_configs(config_file, overrides)


@click.group()
def main() -> None:
    """Audio-visual sound source localization toolkit."""


@main.command("make-fixtures")
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--labeled", type=int, default=32, show_default=True)
@click.option("--unlabeled", type=int, default=64, show_default=True)
@click.option("--test", "n_test", type=int, default=8, show_default=True)
@click.option("--seed", type=int, default=7, show_default=True)
@click.option("--sample-rate", type=int, default=16000, show_default=True)
@_guarded
def make_fixtures_cmd(out, labeled, unlabeled, n_test, seed, sample_rate) -> None:
    """Synthesize a self-contained toy corpus with quadrant-coded tones."""
    cfg = FixtureConfig(
        n_labeled=labeled, n_unlabeled=unlabeled, n_test=n_test, sample_rate=sample_rate
    )
    manifest = make_fixture_dataset(cfg, seed, out)
    counts = manifest.counts()
    click.echo(
        f"wrote {len(manifest.entries)} pairs to {out} "
        f"(labeled={counts['train_labeled']}, unlabeled={counts['train_unlabeled']}, "
        f"test={counts['test']})"
    )


@main.command("ingest")
@click.option("--annotations", type=click.Path(path_type=Path), required=True)
@click.option("--media-root", type=click.Path(path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--split", type=click.Choice(("train", "test")), default="train", show_default=True)
@click.option("--unlabeled", is_flag=True, help="Drop annotations from the emitted pairs.")
@_guarded
def ingest_cmd(annotations, media_root, out, split, unlabeled) -> None:
    """Extract image-audio pairs from an annotated video corpus."""
    manifest = ingest_corpus(annotations, media_root, out, split=split, labeled=not unlabeled)
    click.echo(f"ingested {len(manifest.entries)} pairs into {out}")


@main.command("train")
@click.option("--manifest", "manifest_path", type=click.Path(path_type=Path), required=True)
@click.option("--run-dir", type=click.Path(path_type=Path), required=True)
@click.option("--no-final-eval", is_flag=True, help="Skip evaluation after training.")
@click.option("--overlays/--no-overlays", default=True, show_default=True,
              help="Render test-pair overlays into RUN_DIR/overlays after eval.")
@_config_options
@_guarded
def train_cmd(manifest_path, run_dir, no_final_eval, overlays, config_file, **flags) -> None:
    """Train on a manifest and write run artifacts into RUN_DIR."""
    configs = _build(config_file, **flags)
    manifest = read_manifest(manifest_path)
    record = train_mod.train(
        configs, manifest, run_dir, final_eval=not no_final_eval, overlays=overlays
    )
    click.echo(f"trained {record.steps_run} steps in {record.wall_seconds:.1f}s -> {run_dir}")
    if record.report is not None:
        click.echo(
            f"cIoU@0.5 = {record.report.ciou_at_05:.4f}, AUC = {record.report.auc:.4f}"
        )


@main.command("eval")
@click.option("--manifest", "manifest_path", type=click.Path(path_type=Path), required=True)
@click.option("--snapshot", type=click.Path(path_type=Path), default=None,
              help="Model checkpoint to evaluate.")
@click.option("--heatmap-dir", type=click.Path(path_type=Path), default=None,
              help="Directory of precomputed <pair_id>.npy heatmaps (offline scoring).")
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--theta", type=float, default=0.5, show_default=True,
              help="Binarization threshold on the min-max-normalized heatmap.")
@_guarded
def eval_cmd(manifest_path, snapshot, heatmap_dir, out, theta) -> None:
    """Score a snapshot (or precomputed heatmaps) on the test split."""
    if (snapshot is None) == (heatmap_dir is None):
        raise ValidationError("provide exactly one of --snapshot or --heatmap-dir")
    manifest = read_manifest(manifest_path)
    source = snapshot if snapshot is not None else heatmap_dir
    report = metrics_mod.evaluate(source, manifest, theta=theta)
    metrics_mod.write_report(report, out)
    visualize_mod.success_curve_figure(report.curve, Path(out) / "curve.png")
    click.echo(f"cIoU@0.5 = {report.ciou_at_05:.4f}, AUC = {report.auc:.4f} -> {out}")


@main.command("sweep")
@click.option("--manifest", "manifest_path", type=click.Path(path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--grid", default="128:3e-5,64:5e-5,128:5e-5", show_default=True,
              help="Comma-separated batch:ssl_head_lr pairs.")
@_config_options
@_guarded
def sweep_cmd(manifest_path, out, grid, config_file, **flags) -> None:
    """Train/evaluate a (batch size, ssl-head lr) grid and emit the table."""
    configs = _build(config_file, **flags)
    grid_cfgs = []
    for item in grid.split(","):
        try:
            bz_s, lr_s = item.strip().split(":")
            from dataclasses import replace

            grid_cfgs.append(
                replace(configs.train, batch_size=int(bz_s), ssl_head_lr=float(lr_s))
            )
        except (ValueError, TypeError):
            raise ValidationError(f"bad grid item '{item}'; expected batch:lr") from None
    manifest = read_manifest(manifest_path)
    rows = train_mod.sweep(grid_cfgs, manifest, out, configs.model, configs.pre)
    click.echo(train_mod.SWEEP_HEADER)
    for row in rows:
        click.echo(row.as_csv())


@main.command("visualize")
@click.option("--manifest", "manifest_path", type=click.Path(path_type=Path), required=True)
@click.option("--snapshot", type=click.Path(path_type=Path), default=None)
@click.option("--heatmap-dir", type=click.Path(path_type=Path), default=None)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--theta", type=float, default=0.5, show_default=True)
@_guarded
def visualize_cmd(manifest_path, snapshot, heatmap_dir, out, theta) -> None:
    """Render annotation / heatmap / binarized-contour overlays per test pair."""
    if (snapshot is None) == (heatmap_dir is None):
        raise ValidationError("provide exactly one of --snapshot or --heatmap-dir")
    manifest = read_manifest(manifest_path)
    source = snapshot if snapshot is not None else heatmap_dir
    written = visualize_mod.render_overlays(source, manifest, out, theta)
    click.echo(f"wrote {len(written)} overlays to {out}")


if __name__ == "__main__":
    main()
