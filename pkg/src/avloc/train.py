"""Training loop and parameter sweeps.

A run is one writer to its run directory: `config.echo`, `loss.log`,
`ckpt/`, `report.*`, and optional `overlays/`. Given the same config, seed,
and manifest, two runs on one machine produce bit-identical loss logs and
reports.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import metrics as metrics_mod
from .config import RunConfigs, TrainConfig, format_lr, method_label
from .errors import ConfigError, DivergenceError, ValidationError
from .ingest import DatasetManifest, apply_labeled_fraction, load_pair
from .losses import LossBundle, semipl_loss
from .model import ModelConfig, TriStreamLocalizer, save_checkpoint
from .preprocess import (
    PreprocessConfig,
    audio_to_spectrogram,
    augment_views,
    gt_maps_for_record_list,
    image_to_tensor,
)

LOSS_LOG_HEADER = "step,l_s,l_u,total,n_labeled,n_unlabeled"


@dataclass
class LoadedPair:
    pair_id: str
    base: torch.Tensor  # normalized 3x224x224
    spec: torch.Tensor  # (mels, frames)
    gt_subjects: np.ndarray | None  # (N, 224, 224) uint8
    sound_type: str | None


@dataclass
class RunRecord:
    run_dir: Path
    steps_run: int
    wall_seconds: float
    report: metrics_mod.MetricReport | None
    loss_log: Path


def load_train_pool(
    manifest: DatasetManifest, pre_cfg: PreprocessConfig
) -> list[LoadedPair]:
    pool = []
    for entry in manifest.subset("train"):
        pair = load_pair(manifest, entry)
        pool.append(
            LoadedPair(
                pair_id=pair.pair_id,
                base=image_to_tensor(pair.image, pre_cfg),
                spec=torch.from_numpy(audio_to_spectrogram(pair.audio, pre_cfg)),
                gt_subjects=gt_maps_for_record_list(pair.gt_boxes) if pair.labeled else None,
                sound_type=pair.sound_type,
            )
        )
    return pool


def build_optimizer(model: TriStreamLocalizer, cfg: TrainConfig) -> torch.optim.Optimizer:
    """Momentum-free adaptive optimizer with two learning-rate groups:
    the projector/predictor head at ssl_head_lr, everything else at base_lr."""
    return torch.optim.RMSprop(
        [
            {"params": list(model.backbone_parameters()), "lr": cfg.base_lr},
            {"params": list(model.ssl_head_parameters()), "lr": cfg.ssl_head_lr},
        ]
    )


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _log_line(step: int, bundle: LossBundle) -> str:
    l_s = None if bundle.l_s is None else bundle.l_s.item()
    return ",".join(
        (
            str(step),
            _fmt(l_s),
            _fmt(bundle.l_u.item()),
            _fmt(bundle.total.item()),
            str(bundle.n_labeled),
            str(bundle.n_unlabeled),
        )
    )


def _aug_seed(seed: int, step: int, slot: int) -> int:
    return ((seed * 1_000_003 + step) * 100_003 + slot) & 0x7FFFFFFFFFFFFFFF


def train(
    configs: RunConfigs,
    manifest: DatasetManifest,
    run_dir: Path,
    final_eval: bool = True,
    overlays: bool = False,
) -> RunRecord:
    """Optimize the configured objective over the manifest's train split.

    mode `semipl` uses both loss terms, `sspl_unsup` ignores labels, and
    `supervised_only` samples labeled pairs and optimizes the heatmap term
    alone. A non-finite objective aborts with a diagnostic snapshot.
    """
    cfg = configs.train.validate()
    pre_cfg = configs.pre
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    manifest = apply_labeled_fraction(manifest, cfg.labeled_fraction, cfg.seed)
    pool = load_train_pool(manifest, pre_cfg)
    if not pool:
        raise ValidationError("manifest has no train entries")
    if cfg.mode == "supervised_only":
        pool = [s for s in pool if s.gt_subjects is not None]
        if not pool:
            raise ConfigError("supervised_only needs labeled train pairs")

    classes: list[str] = []
    model_cfg = configs.model
    if model_cfg.use_class_labels:
        classes = sorted({s.sound_type for s in pool if s.sound_type is not None})
        if not classes:
            raise ConfigError("class labels requested but no sound types in the pool")
        model_cfg = replace(model_cfg, n_classes=len(classes))
    model_cfg.validate()

    torch.manual_seed(cfg.seed)
    model = TriStreamLocalizer(model_cfg)
    model.train()
    optimizer = build_optimizer(model, cfg)
    sampler = torch.Generator().manual_seed((cfg.seed + 0x9E3779B9) & 0x7FFFFFFF)
    class_to_idx = {c: i for i, c in enumerate(classes)}

    (run_dir / "config.echo").write_text(configs.echo(), encoding="utf-8")
    loss_log = run_dir / "loss.log"
    class_log = run_dir / "class_loss.log" if model_cfg.use_class_labels else None
    ckpt_dir = run_dir / "ckpt"

    t_start = time.monotonic()
    with loss_log.open("w", encoding="utf-8") as log_fh:
        log_fh.write(LOSS_LOG_HEADER + "\n")
        class_fh = class_log.open("w", encoding="utf-8") if class_log else None
        if class_fh:
            class_fh.write("step,l_cls\n")
        try:
            for step in range(1, cfg.steps + 1):
                idx = torch.randint(len(pool), (cfg.batch_size,), generator=sampler)
                batch = [pool[int(i)] for i in idx]
                base = torch.stack([s.base for s in batch])
                if pre_cfg.aug_enabled:
                    pairs = [
                        augment_views(s.base, pre_cfg, _aug_seed(cfg.seed, step, j))
                        for j, s in enumerate(batch)
                    ]
                    view1 = torch.stack([v1 for v1, _ in pairs])
                    view2 = torch.stack([v2 for _, v2 in pairs])
                else:
                    view1 = view2 = base
                spec = torch.stack([s.spec for s in batch])[:, None]
                if cfg.mode == "sspl_unsup":
                    gts = [None] * len(batch)
                else:
                    gts = [s.gt_subjects for s in batch]

                out = model(base, view1, view2, spec)
                bundle = semipl_loss(out, gts, sup_weight=cfg.sup_weight)
                if cfg.mode == "supervised_only":
                    objective = bundle.l_s
                elif cfg.mode == "sspl_unsup" or bundle.l_s is None:
                    objective = bundle.l_u
                else:
                    objective = bundle.total

                if model_cfg.use_class_labels and cfg.class_loss_weight >= 0:
                    with_label = [
                        (j, class_to_idx[s.sound_type])
                        for j, s in enumerate(batch)
                        if s.sound_type in class_to_idx
                    ]
                    if with_label:
                        rows = [j for j, _ in with_label]
                        tgt = torch.tensor([c for _, c in with_label])
                        l_cls = torch.nn.functional.cross_entropy(out.logits[rows], tgt)
                        if cfg.class_loss_weight > 0:
                            objective = objective + cfg.class_loss_weight * l_cls
                        if class_fh:
                            class_fh.write(f"{step},{repr(l_cls.item())}\n")

                if not torch.isfinite(objective):
                    save_checkpoint(
                        ckpt_dir / "diverged.pt", model, pre_cfg, step, classes, optimizer
                    )
                    raise DivergenceError(
                        f"non-finite objective at step {step}; snapshot in {ckpt_dir}"
                    )

                optimizer.zero_grad()
                objective.backward()
                optimizer.step()
                log_fh.write(_log_line(step, bundle) + "\n")

                if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    save_checkpoint(
                        ckpt_dir / f"step_{step:06d}.pt",
                        model,
                        pre_cfg,
                        step,
                        classes,
                        optimizer,
                    )
        finally:
            if class_fh:
                class_fh.close()

    save_checkpoint(ckpt_dir / "final.pt", model, pre_cfg, cfg.steps, classes, optimizer)
    wall = time.monotonic() - t_start

    report = None
    if final_eval and manifest.subset("test"):
        from .model import CheckpointBundle

        bundle_obj = CheckpointBundle(
            model=model,
            model_cfg=model_cfg,
            pre_cfg=pre_cfg,
            global_step=cfg.steps,
            classes=classes,
        )
        report = metrics_mod.evaluate(
            bundle_obj,
            manifest,
            config_echo={
                "method": method_label(cfg.mode),
                "bz": cfg.batch_size,
                "lr": format_lr(cfg.ssl_head_lr),
            },
        )
        metrics_mod.write_report(report, run_dir)
        from .visualize import loss_curve_figure, render_overlays, success_curve_figure

        success_curve_figure(report.curve, run_dir / "curve.png")
        loss_curve_figure(loss_log, run_dir / "loss_curve.png")
        if overlays:
            render_overlays(bundle_obj, manifest, run_dir / "overlays")

    return RunRecord(
        run_dir=run_dir,
        steps_run=cfg.steps,
        wall_seconds=wall,
        report=report,
        loss_log=loss_log,
    )


# --------------------------------------------------------------------------
# Parameter sweep: one row per config, same column layout as the
# quantitative comparison tables (Method, bz, lr, cIoU, AUC).
# --------------------------------------------------------------------------

@dataclass
class SweepRow:
    method: str
    bz: int
    lr: str
    ciou: float  # percent
    auc: float  # percent

    def as_csv(self) -> str:
        return f"{self.method},{self.bz},{self.lr},{self.ciou:.2f},{self.auc:.2f}"


SWEEP_HEADER = "Method,bz,lr,cIoU,AUC"


def sweep(
    grid: list[TrainConfig],
    manifest: DatasetManifest,
    out_dir: Path,
    model_cfg: ModelConfig,
    pre_cfg: PreprocessConfig,
) -> list[SweepRow]:
    """Train and evaluate each config; emit the comparison table sorted by
    cIoU. Per-run failures are recorded and the sweep continues."""
    if not grid:
        raise ValidationError("sweep needs at least one config")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows: list[SweepRow] = []
    failures: list[str] = []
    for i, cfg in enumerate(grid):
        run_dir = out_dir / f"run_{i:02d}"
        try:
            record = train(
                RunConfigs(train=cfg, model=model_cfg, pre=pre_cfg),
                manifest,
                run_dir,
                final_eval=True,
            )
            if record.report is None:
                raise ValidationError("sweep manifest has no test entries")
            rows.append(
                SweepRow(
                    method=method_label(cfg.mode),
                    bz=cfg.batch_size,
                    lr=format_lr(cfg.ssl_head_lr),
                    ciou=100.0 * record.report.ciou_at_05,
                    auc=100.0 * record.report.auc,
                )
            )
        except Exception as exc:  # noqa: BLE001 - recorded, sweep continues
            failures.append(f"run_{i:02d} (bz={cfg.batch_size}, lr={cfg.ssl_head_lr}): {exc}")
    rows.sort(key=lambda r: r.ciou)

    table = SWEEP_HEADER + "\n" + "\n".join(r.as_csv() for r in rows) + "\n"
    (out_dir / "sweep_table.csv").write_text(table, encoding="utf-8")
    if failures:
        (out_dir / "sweep_failures.log").write_text("\n".join(failures) + "\n", encoding="utf-8")
    if rows:
        from .visualize import sweep_figure

        sweep_figure(rows, out_dir / "sweep_metrics.png")
    return rows
