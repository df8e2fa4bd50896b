"""Qualitative rendering: per-pair overlay triptychs and report figures.

All figures render headlessly to files. Each evaluated pair yields three
PNGs named `<pair_id>_gt.png` (annotation boxes), `<pair_id>_heat.png`
(heatmap colormap overlay), and `<pair_id>_bin.png` (binarized-map contour).
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.patches import Rectangle
from PIL import Image

from .errors import MediaError, ValidationError
from .ingest import DatasetManifest, SamplePair, load_pair
from .metrics import binarize
from .preprocess import IMAGE_SIZE, scale_bbox


def _display_image(pair: SamplePair) -> np.ndarray:
    im = Image.fromarray(pair.image).resize((IMAGE_SIZE, IMAGE_SIZE), Image.BILINEAR)
    return np.asarray(im)


def _save(fig, path: Path) -> None:
    try:
        fig.savefig(path, dpi=100, bbox_inches="tight")
    except OSError as exc:
        raise MediaError(f"cannot write figure {path}: {exc}") from exc
    finally:
        plt.close(fig)


def _base_axes(img: np.ndarray):
    fig, ax = plt.subplots(figsize=(3.2, 3.2))
    ax.imshow(img)
    ax.set_axis_off()
    return fig, ax


def overlay_triptych(
    pair: SamplePair,
    heatmap: np.ndarray,
    out_dir: Path,
    theta: float = 0.5,
) -> list[Path]:
    """Write the three overlay PNGs for one pair; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    img = _display_image(pair)
    written = []

    fig, ax = _base_axes(img)
    for rec in pair.gt_boxes:
        x1, y1, x2, y2 = scale_bbox(rec.bbox)
        ax.add_patch(
            Rectangle((x1, y1), x2 - x1, y2 - y1, fill=False, edgecolor="lime", linewidth=2)
        )
    path = out_dir / f"{pair.pair_id}_gt.png"
    _save(fig, path)
    written.append(path)

    fig, ax = _base_axes(img)
    ax.imshow(heatmap, cmap="jet", alpha=0.5, vmin=0.0, vmax=1.0)
    path = out_dir / f"{pair.pair_id}_heat.png"
    _save(fig, path)
    written.append(path)

    fig, ax = _base_axes(img)
    bin_map = binarize(heatmap, theta)
    if bin_map.min() != bin_map.max():  # a constant map has no contour
        ax.contour(bin_map, levels=[0.5], colors="red", linewidths=2)
    path = out_dir / f"{pair.pair_id}_bin.png"
    _save(fig, path)
    written.append(path)
    return written


def render_overlays(
    source,
    manifest: DatasetManifest,
    out_dir: Path,
    theta: float = 0.5,
) -> list[Path]:
    """Overlay triptychs for every annotated test pair.

    `source` follows the same convention as evaluation: a checkpoint path,
    a loaded bundle, or a directory of precomputed heatmaps. Per-file write
    failures are reported but do not stop the run.
    """
    entries = manifest.subset("test")
    if not entries:
        raise ValidationError("manifest has no test entries to visualize")
    heatmap_dir: Path | None = None
    bundle = None
    if isinstance(source, (str, Path)) and Path(source).is_dir():
        heatmap_dir = Path(source)
    else:
        from .model import load_checkpoint

        bundle = source if hasattr(source, "model") else load_checkpoint(source)

    written: list[Path] = []
    errors: list[str] = []
    for entry in entries:
        if entry.annotation is None:
            raise ValidationError(f"test entry '{entry.pair_id}' is unlabeled")
        pair = load_pair(manifest, entry)
        if heatmap_dir is not None:
            heat = np.load(heatmap_dir / f"{entry.pair_id}.npy")
        else:
            heat = bundle.heatmap_for_pair(pair)
        try:
            written.extend(overlay_triptych(pair, heat, out_dir, theta))
        except MediaError as exc:
            errors.append(str(exc))
    if errors:
        print("overlay write failures:\n  " + "\n  ".join(errors))
    return written


def success_curve_figure(curve: list[tuple[float, float]], out_path: Path) -> None:
    taus = [t for t, _ in curve]
    ratios = [r for _, r in curve]
    fig, ax = plt.subplots(figsize=(4.2, 3.2))
    ax.plot(taus, ratios, marker="o", markersize=3)
    ax.set_xlabel("cIoU threshold")
    ax.set_ylabel("success ratio")
    ax.set_xlim(0, 1)
    ax.set_ylim(-0.02, 1.02)
    ax.grid(alpha=0.3)
    _save(fig, Path(out_path))


def loss_curve_figure(loss_log: Path, out_path: Path) -> None:
    steps, l_s, l_u, total = [], [], [], []
    lines = Path(loss_log).read_text(encoding="utf-8").splitlines()
    for line in lines[1:]:
        parts = line.split(",")
        steps.append(int(parts[0]))
        l_s.append(float(parts[1]) if parts[1] else np.nan)
        l_u.append(float(parts[2]))
        total.append(float(parts[3]))
    fig, ax = plt.subplots(figsize=(4.8, 3.2))
    ax.plot(steps, total, label="total", linewidth=1.2)
    if not all(np.isnan(v) for v in l_s):
        ax.plot(steps, l_s, label="supervised", linewidth=0.9, alpha=0.8)
    ax.plot(steps, l_u, label="unsupervised", linewidth=0.9, alpha=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    _save(fig, Path(out_path))


def sweep_figure(rows, out_path: Path) -> None:
    labels = [f"bz={r.bz}\nlr={r.lr}" for r in rows]
    x = np.arange(len(rows))
    width = 0.38
    fig, ax = plt.subplots(figsize=(1.6 + 1.4 * len(rows), 3.4))
    ax.bar(x - width / 2, [r.ciou for r in rows], width, label="cIoU@0.5 (%)")
    ax.bar(x + width / 2, [r.auc for r in rows], width, label="AUC (%)")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylabel("percent")
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    _save(fig, Path(out_path))
