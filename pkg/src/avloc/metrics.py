"""Localization evaluation: consensus IoU over multi-subject ground truth,
success rate at a threshold, and area under the success-ratio curve.

Two distinct 0.5 values appear here: `theta` binarizes min-max-normalized
heatmaps into infer maps, and 0.5 is also the default success threshold for
the headline cIoU@0.5 number. They are independent knobs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .ingest import DatasetManifest, load_pair
from .preprocess import gt_maps_for_record_list

DEFAULT_TAU_GRID: tuple[float, ...] = tuple(np.linspace(0.0, 1.0, 21).tolist())
BINARIZE_THETA = 0.5
SUCCESS_THRESHOLD = 0.5


def binarize(heatmap: np.ndarray, theta: float = BINARIZE_THETA) -> np.ndarray:
    """Min-max normalize, then threshold at `theta`.

    A constant heatmap (no dynamic range) binarizes to all zeros rather than
    scoring a spurious full-frame prediction.
    """
    h = np.asarray(heatmap, dtype=np.float64)
    if not np.isfinite(h).all():
        raise ValidationError("heatmap contains non-finite values")
    lo = h.min()
    hi = h.max()
    if hi == lo:
        return np.zeros_like(h, dtype=np.uint8)
    norm = (h - lo) / (hi - lo)
    return (norm >= theta).astype(np.uint8)


def ciou(infer: np.ndarray, gt_maps: np.ndarray | list[np.ndarray]) -> float:
    """Consensus IoU of one binary infer map against N binary subject maps.

    numerator   = sum_i sum_px infer * gt_i
    denominator = sum_i [ sum_px gt_i + sum_px infer * (gt_i == 0) ]

    Returns 0.0 when the denominator is zero (both maps empty).
    """
    infer = np.asarray(infer)
    gts = np.asarray(gt_maps)
    if gts.ndim == 2:
        gts = gts[None]
    if gts.ndim != 3 or gts.shape[0] < 1:
        raise ValidationError(f"gt_maps must be (N, H, W) with N >= 1, got {gts.shape}")
    if infer.shape != gts.shape[1:]:
        raise ValidationError(
            f"shape mismatch: infer {infer.shape} vs gt {gts.shape[1:]}"
        )
    inf = infer.astype(np.float64)
    g = gts.astype(np.float64)
    numerator = float((inf[None] * g).sum())
    denominator = float(g.sum() + (inf[None] * (g == 0)).sum())
    if denominator == 0:
        return 0.0
    return numerator / denominator


def success_curve(
    per_sample_ciou: list[float], thresholds: tuple[float, ...] = DEFAULT_TAU_GRID
) -> list[tuple[float, float]]:
    """Fraction of samples with cIoU >= tau, for each tau; non-increasing."""
    if len(per_sample_ciou) == 0:
        raise ValidationError("success_curve needs at least one sample")
    taus = list(thresholds)
    if any(t < 0 or t > 1 for t in taus) or any(
        b <= a for a, b in zip(taus, taus[1:])
    ):
        raise ValidationError("thresholds must be strictly ascending within [0, 1]")
    vals = np.asarray(per_sample_ciou, dtype=np.float64)
    n = len(vals)
    return [(float(t), float((vals >= t).sum() / n)) for t in taus]


def auc(curve: list[tuple[float, float]]) -> float:
    """Trapezoidal area under the success-ratio curve over tau in [0, 1]."""
    if len(curve) < 2:
        raise ValidationError("curve needs at least two points")
    taus = np.asarray([t for t, _ in curve], dtype=np.float64)
    ratios = np.asarray([r for _, r in curve], dtype=np.float64)
    if taus[0] != 0.0 or taus[-1] != 1.0 or (np.diff(taus) <= 0).any():
        raise ValidationError("tau grid must ascend from 0.0 to 1.0")
    return float(np.trapezoid(ratios, taus))


@dataclass
class MetricReport:
    """Evaluation summary plus the sweep metadata needed for table rows."""

    pair_ids: list[str]
    per_sample_ciou: list[float]
    ciou_at_05: float
    auc: float
    n_samples: int
    curve: list[tuple[float, float]]
    config_echo: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "pair_ids": self.pair_ids,
            "per_sample_ciou": self.per_sample_ciou,
            "ciou_at_05": self.ciou_at_05,
            "auc": self.auc,
            "n_samples": self.n_samples,
            "curve": [[t, r] for t, r in self.curve],
            "config_echo": self.config_echo,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        obj = json.loads(text)
        return cls(
            pair_ids=list(obj["pair_ids"]),
            per_sample_ciou=[float(v) for v in obj["per_sample_ciou"]],
            ciou_at_05=float(obj["ciou_at_05"]),
            auc=float(obj["auc"]),
            n_samples=int(obj["n_samples"]),
            curve=[(float(t), float(r)) for t, r in obj["curve"]],
            config_echo=dict(obj.get("config_echo", {})),
        )

    def table_row(self) -> str:
        """Comparison-table row: method, bz, lr, cIoU(%), AUC(%)."""
        echo = self.config_echo
        return "{method},{bz},{lr},{ciou:.2f},{auc:.2f}".format(
            method=echo.get("method", "-"),
            bz=echo.get("bz", "-"),
            lr=echo.get("lr", "-"),
            ciou=100.0 * self.ciou_at_05,
            auc=100.0 * self.auc,
        )

    def supervision_row(self) -> str:
        """Short form: method, cIoU(%), AUC(%)."""
        return "{method},{ciou:.2f},{auc:.2f}".format(
            method=self.config_echo.get("method", "-"),
            ciou=100.0 * self.ciou_at_05,
            auc=100.0 * self.auc,
        )

    def curve_csv(self) -> str:
        lines = ["tau,ratio"]
        lines += [f"{t},{r}" for t, r in self.curve]
        return "\n".join(lines) + "\n"


def score_heatmaps(
    samples: list[tuple[str, np.ndarray, np.ndarray]],
    theta: float = BINARIZE_THETA,
    thresholds: tuple[float, ...] = DEFAULT_TAU_GRID,
    config_echo: dict | None = None,
) -> MetricReport:
    """Score (pair_id, heatmap, gt_subject_maps) triples into a MetricReport."""
    if not samples:
        raise ValidationError("nothing to evaluate")
    pair_ids = []
    cious = []
    for pair_id, heatmap, gt in samples:
        pair_ids.append(pair_id)
        cious.append(ciou(binarize(heatmap, theta), gt))
    curve = success_curve(cious, thresholds)
    return MetricReport(
        pair_ids=pair_ids,
        per_sample_ciou=cious,
        ciou_at_05=float(np.mean(np.asarray(cious) >= SUCCESS_THRESHOLD)),
        auc=auc(curve),
        n_samples=len(cious),
        curve=curve,
        config_echo=dict(config_echo or {}),
    )


def _heatmap_from_dir(heatmap_dir: Path, pair_id: str) -> np.ndarray:
    """Offline scoring path: one `<pair_id>.npy` float array per pair."""
    path = Path(heatmap_dir) / f"{pair_id}.npy"
    if not path.exists():
        raise ValidationError(f"missing precomputed heatmap: {path}")
    return np.load(path)


def evaluate(
    source,
    manifest: DatasetManifest,
    theta: float = BINARIZE_THETA,
    thresholds: tuple[float, ...] = DEFAULT_TAU_GRID,
    config_echo: dict | None = None,
) -> MetricReport:
    """Run eval-mode inference over the manifest's test split and score it.

    `source` is a checkpoint path, a loaded checkpoint bundle, or a directory
    of precomputed `<pair_id>.npy` heatmaps. Every test entry must carry an
    annotation; evaluation is deterministic.
    """
    entries = manifest.subset("test")
    if not entries:
        raise ValidationError("manifest has no test entries")
    for e in entries:
        if e.annotation is None:
            raise ValidationError(f"test entry '{e.pair_id}' is unlabeled")

    heatmap_dir: Path | None = None
    bundle = None
    if isinstance(source, (str, Path)) and Path(source).is_dir():
        heatmap_dir = Path(source)
    else:
        from .model import load_checkpoint

        bundle = source if hasattr(source, "model") else load_checkpoint(source)

    samples = []
    for e in entries:
        pair = load_pair(manifest, e)
        gt = gt_maps_for_record_list(pair.gt_boxes)
        if heatmap_dir is not None:
            heat = _heatmap_from_dir(heatmap_dir, e.pair_id)
            if heat.shape != gt.shape[1:]:
                raise ValidationError(
                    f"heatmap for '{e.pair_id}' has shape {heat.shape}, expected {gt.shape[1:]}"
                )
        else:
            heat = bundle.heatmap_for_pair(pair)
        samples.append((e.pair_id, heat, gt))
    return score_heatmaps(samples, theta=theta, thresholds=thresholds, config_echo=config_echo)


def write_report(report: MetricReport, out_dir: Path) -> None:
    """Serialize a report: JSON document, table row, and curve CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out_dir / "report.row").write_text(
        "Method,bz,lr,cIoU,AUC\n" + report.table_row() + "\n", encoding="utf-8"
    )
    (out_dir / "curve.csv").write_text(report.curve_csv(), encoding="utf-8")
