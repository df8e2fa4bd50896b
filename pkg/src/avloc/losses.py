"""Training objective: supervised heatmap cross-entropy plus a symmetric
negative-cosine-similarity term over predictor/projector outputs.

The second argument of `ncs` is always treated as a constant (gradient
blocked); the predictor side carries the gradient. The combined objective is
the unweighted sum of both terms; an optional supervised multiplier exists
for experiments and defaults to 1.0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ValidationError

BCE_EPS = 1e-7


@dataclass
class LossBundle:
    """Per-batch objective breakdown. `l_s` is None for all-unlabeled batches;
    `total` is sup_weight * l_s + l_u when labels are present, else l_u."""

    l_s: torch.Tensor | None
    l_u: torch.Tensor
    total: torch.Tensor
    n_labeled: int
    n_unlabeled: int


def _as_2d(v: torch.Tensor, name: str) -> torch.Tensor:
    if v.dim() == 1:
        return v[None, :]
    if v.dim() == 2:
        return v
    raise ValidationError(f"{name} must be a vector or a batch of vectors, got {v.dim()}d")


def ncs(p: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Negative cosine similarity -(p.z)/(|p||z|), mean over the batch.

    `z` is detached, so the result carries gradient only through `p`.
    Zero-norm inputs are an error; no epsilon is folded into the value.
    """
    p2 = _as_2d(p, "p")
    z2 = _as_2d(z, "z").detach()
    if p2.shape != z2.shape:
        raise ValidationError(f"shape mismatch: p {tuple(p2.shape)} vs z {tuple(z2.shape)}")
    p_norm = p2.norm(dim=1)
    z_norm = z2.norm(dim=1)
    if (p_norm == 0).any() or (z_norm == 0).any():
        raise ValidationError("ncs is undefined for zero-norm vectors")
    cos = (p2 * z2).sum(dim=1) / (p_norm * z_norm)
    return -cos.mean()


def unsup_loss(
    p1: torch.Tensor, p2: torch.Tensor, z1: torch.Tensor, z2: torch.Tensor
) -> torch.Tensor:
    """Symmetric cross-pairing: (ncs(p1, z2) + ncs(p2, z1)) / 2."""
    return 0.5 * (ncs(p1, z2) + ncs(p2, z1))


def sup_loss(pred_heatmap: torch.Tensor, gt_map: torch.Tensor) -> torch.Tensor:
    """Per-pixel binary cross-entropy over flattened heatmaps.

    Predictions are clamped to [eps, 1-eps] so the value stays finite at the
    endpoints; the mean runs over every pixel of every sample given.
    """
    if pred_heatmap.shape != gt_map.shape:
        raise ValidationError(
            f"shape mismatch: pred {tuple(pred_heatmap.shape)} vs gt {tuple(gt_map.shape)}"
        )
    y_hat = pred_heatmap.clamp(BCE_EPS, 1.0 - BCE_EPS)
    y = gt_map.to(y_hat.dtype)
    ce = -(y * torch.log(y_hat) + (1.0 - y) * torch.log(1.0 - y_hat))
    return ce.mean()


def _or_subjects(gt: np.ndarray | torch.Tensor) -> torch.Tensor:
    """Collapse (N, H, W) subject maps to a single {0,1} target by OR."""
    t = torch.as_tensor(np.asarray(gt))
    if t.dim() == 2:
        t = t[None]
    if t.dim() != 3 or t.shape[0] < 1:
        raise ValidationError(f"ground truth must be (N, H, W) with N >= 1, got {tuple(t.shape)}")
    merged = t.amax(dim=0)
    if merged.sum() == 0:
        raise ValidationError("labeled sample has an empty ground-truth map")
    return merged.float()


def semipl_loss(
    forward,
    gt_maps: list[np.ndarray | torch.Tensor | None],
    sup_weight: float = 1.0,
) -> LossBundle:
    """Combined objective over a batch that may mix labeled and unlabeled samples.

    `forward` carries heatmap_full (B, H, W) and p1/p2/z1/z2 (B, d). `gt_maps`
    holds per-sample subject stacks (None marks unlabeled). The supervised term
    averages over the labeled subset only; the unsupervised term averages over
    the whole batch. Multi-subject ground truth is OR-reduced to one target map.
    """
    heat = forward.heatmap_full
    batch = heat.shape[0]
    if len(gt_maps) != batch:
        raise ValidationError(f"got {len(gt_maps)} gt entries for a batch of {batch}")

    l_u = unsup_loss(forward.p1, forward.p2, forward.z1, forward.z2)

    labeled_idx = [i for i, g in enumerate(gt_maps) if g is not None]
    n_labeled = len(labeled_idx)
    if n_labeled == 0:
        return LossBundle(
            l_s=None, l_u=l_u, total=l_u, n_labeled=0, n_unlabeled=batch
        )
    targets = torch.stack([_or_subjects(gt_maps[i]) for i in labeled_idx])
    l_s = sup_loss(heat[labeled_idx], targets)
    total = sup_weight * l_s + l_u
    return LossBundle(
        l_s=l_s,
        l_u=l_u,
        total=total,
        n_labeled=n_labeled,
        n_unlabeled=batch - n_labeled,
    )
