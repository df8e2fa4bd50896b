from __future__ import annotations

import math
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from avloc.errors import ValidationError
from avloc.losses import ncs, semipl_loss, sup_loss, unsup_loss
from oracles import central_difference_grad, ncs_scalar, semipl_scalar


def t(*vals):
    return torch.tensor(vals, dtype=torch.float64)


# ---------------------------------------------------------------------- ncs

def test_ncs_parallel_unit_vectors():
    p = t(1.0, 0.0, 0.0)
    assert ncs(p, p).item() == pytest.approx(-1.0, abs=1e-6)


def test_ncs_orthogonal():
    assert ncs(t(1.0, 0.0), t(0.0, 1.0)).item() == pytest.approx(0.0, abs=1e-12)


def test_ncs_hand_value():
    assert ncs(t(3.0, 4.0), t(4.0, 3.0)).item() == pytest.approx(-24.0 / 25.0, abs=1e-12)


def test_ncs_rejects_zero_norm():
    with pytest.raises(ValidationError):
        ncs(t(0.0, 0.0), t(1.0, 0.0))
    with pytest.raises(ValidationError):
        ncs(t(1.0, 0.0), t(0.0, 0.0))


def test_ncs_range_and_self_similarity_sweep():
    rng = np.random.default_rng(0)
    p = torch.from_numpy(rng.standard_normal((10_000, 8)))
    z = torch.from_numpy(rng.standard_normal((10_000, 8)))
    with torch.no_grad():
        for i in range(10_000):
            v = ncs(p[i], z[i]).item()
            assert -1.0 - 1e-9 <= v <= 1.0 + 1e-9
        for i in range(0, 10_000, 7):
            assert ncs(p[i], p[i]).item() == pytest.approx(-1.0, abs=1e-6)


def test_ncs_scale_invariance():
    rng = np.random.default_rng(1)
    for _ in range(200):
        p = torch.from_numpy(rng.standard_normal(6))
        z = torch.from_numpy(rng.standard_normal(6))
        a, b = rng.uniform(0.01, 100, size=2)
        assert ncs(a * p, b * z).item() == pytest.approx(ncs(p, z).item(), abs=1e-6)


def test_ncs_batch_mean_reduction():
    p = torch.stack([t(1.0, 0.0), t(0.0, 1.0)])
    z = torch.stack([t(1.0, 0.0), t(1.0, 0.0)])
    assert ncs(p, z).item() == pytest.approx(-0.5)


def test_ncs_gradient_blocked_on_z():
    p = t(0.3, -1.2, 0.7).requires_grad_(True)
    z = t(1.0, 0.4, -0.2).requires_grad_(True)
    ncs(p, z).backward()
    assert p.grad is not None and p.grad.abs().sum() > 0
    assert z.grad is None


def test_ncs_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    for _ in range(20):
        p0 = rng.standard_normal(8)
        z0 = rng.standard_normal(8)
        p = torch.from_numpy(p0.copy()).requires_grad_(True)
        ncs(p, torch.from_numpy(z0)).backward()
        fd = central_difference_grad(
            lambda x: ncs_scalar(x, z0), p0.copy(), h=1e-6
        )
        rel = np.abs(p.grad.numpy() - fd) / np.maximum(np.abs(fd), 1e-8)
        assert rel.max() < 1e-4


# ---------------------------------------------------------------- unsup_loss

def test_unsup_parallel_pairs():
    v = t(0.6, 0.8)
    assert unsup_loss(v, v, v, v).item() == pytest.approx(-1.0, abs=1e-12)


def test_unsup_orthogonal_pairs():
    p1, z2 = t(1.0, 0.0), t(0.0, 1.0)
    p2, z1 = t(0.0, 1.0), t(1.0, 0.0)
    assert unsup_loss(p1, p2, z1, z2).item() == pytest.approx(0.0, abs=1e-12)


def test_unsup_hand_mixed_value():
    # ncs(p1, z2) = -1, ncs(p2, z1) = 0 -> -0.5
    val = unsup_loss(t(1.0, 0.0), t(0.0, 1.0), t(1.0, 0.0), t(1.0, 0.0))
    assert val.item() == pytest.approx(-0.5, abs=1e-12)


def test_unsup_stop_gradient_identically_zero():
    p1 = t(0.3, 0.4).requires_grad_(True)
    p2 = t(-0.2, 0.9).requires_grad_(True)
    z1 = t(1.0, 2.0).requires_grad_(True)
    z2 = t(0.5, -0.5).requires_grad_(True)
    unsup_loss(p1, p2, z1, z2).backward()
    assert z1.grad is None and z2.grad is None
    assert p1.grad is not None and p2.grad is not None


# ------------------------------------------------------------------ sup_loss

def test_sup_uniform_half_is_ln2():
    for y in (torch.zeros(16, 16), torch.ones(16, 16), (torch.rand(16, 16) > 0.5).double()):
        val = sup_loss(torch.full((16, 16), 0.5, dtype=torch.float64), y)
        assert val.item() == pytest.approx(math.log(2.0), abs=1e-9)


def test_sup_perfect_prediction_is_clamp_level():
    y = (torch.rand(32, 32) > 0.3).double()
    val = sup_loss(y.clone(), y).item()
    assert 0 < val <= -math.log(1 - 1e-7) + 1e-12
    assert val == pytest.approx(1e-7, rel=1e-3)


def test_sup_constant_quarter_on_ones():
    y = torch.ones(8, 8, dtype=torch.float64)
    val = sup_loss(torch.full((8, 8), 0.25, dtype=torch.float64), y)
    assert val.item() == pytest.approx(-math.log(0.25), abs=1e-12)
    assert val.item() == pytest.approx(1.3862943611198906, abs=1e-9)


def test_sup_finite_at_endpoints():
    y = torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=torch.float64)
    pred = torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
    assert torch.isfinite(sup_loss(pred, y))


def test_sup_shape_mismatch():
    with pytest.raises(ValidationError):
        sup_loss(torch.zeros(4, 4), torch.zeros(4, 5))


def test_sup_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    from oracles import bce_scalar

    for _ in range(10):
        pred0 = rng.uniform(0.05, 0.95, size=(8, 8))
        y0 = (rng.random((8, 8)) > 0.5).astype(np.float64)
        pred = torch.from_numpy(pred0.copy()).requires_grad_(True)
        sup_loss(pred, torch.from_numpy(y0)).backward()
        fd = central_difference_grad(lambda x: bce_scalar(x, y0), pred0.copy(), h=1e-6)
        rel = np.abs(pred.grad.numpy() - fd) / np.maximum(np.abs(fd), 1e-8)
        assert rel.max() < 1e-4


# --------------------------------------------------------------- semipl_loss

def _fake_forward(batch, d=4, hw=12, seed=0):
    g = torch.Generator().manual_seed(seed)
    return SimpleNamespace(
        heatmap_full=torch.rand(batch, hw, hw, generator=g, dtype=torch.float64),
        p1=torch.randn(batch, d, generator=g, dtype=torch.float64),
        p2=torch.randn(batch, d, generator=g, dtype=torch.float64),
        z1=torch.randn(batch, d, generator=g, dtype=torch.float64),
        z2=torch.randn(batch, d, generator=g, dtype=torch.float64),
    )


def _box_map(hw, x1, y1, x2, y2):
    m = np.zeros((1, hw, hw), dtype=np.uint8)
    m[0, y1:y2, x1:x2] = 1
    return m


def test_semipl_unlabeled_batch_degenerates_to_unsup():
    fw = _fake_forward(3)
    bundle = semipl_loss(fw, [None, None, None])
    assert bundle.l_s is None
    assert bundle.total is bundle.l_u
    assert bundle.n_labeled == 0 and bundle.n_unlabeled == 3


def test_semipl_perfect_labeled_batch_approaches_minus_one():
    hw = 12
    gt = _box_map(hw, 2, 2, 8, 8)
    v = torch.tensor([0.6, 0.8], dtype=torch.float64)
    fw = SimpleNamespace(
        heatmap_full=torch.from_numpy(gt[0][None].astype(np.float64)),
        p1=v[None], p2=v[None], z1=v[None], z2=v[None],
    )
    bundle = semipl_loss(fw, [gt])
    assert bundle.total.item() == pytest.approx(-1.0, abs=1e-5)


def test_semipl_mixed_batch_matches_scalar_loop():
    hw = 12
    fw = _fake_forward(4, seed=3)
    gts = [_box_map(hw, 1, 1, 6, 7), None, _box_map(hw, 3, 0, 9, 5), None]
    # second labeled sample gets two subjects
    gts[2] = np.concatenate([gts[2], _box_map(hw, 5, 5, 11, 11)])
    bundle = semipl_loss(fw, gts)
    l_s, l_u, total = semipl_scalar(
        fw.heatmap_full.numpy(),
        fw.p1.numpy(),
        fw.p2.numpy(),
        fw.z1.numpy(),
        fw.z2.numpy(),
        gts,
    )
    assert bundle.l_s.item() == pytest.approx(l_s, abs=1e-9)
    assert bundle.l_u.item() == pytest.approx(l_u, abs=1e-9)
    assert bundle.total.item() == pytest.approx(total, abs=1e-9)
    assert bundle.n_labeled == 2 and bundle.n_unlabeled == 2


def test_semipl_total_invariant_with_weight():
    fw = _fake_forward(2, seed=5)
    gts = [_box_map(12, 0, 0, 4, 4), None]
    bundle = semipl_loss(fw, gts, sup_weight=1.0)
    assert bundle.total.item() == pytest.approx(
        bundle.l_s.item() + bundle.l_u.item(), abs=1e-12
    )
    weighted = semipl_loss(fw, gts, sup_weight=0.5)
    assert weighted.total.item() == pytest.approx(
        0.5 * weighted.l_s.item() + weighted.l_u.item(), abs=1e-12
    )


def test_semipl_rejects_empty_gt_map():
    fw = _fake_forward(1)
    empty = np.zeros((1, 12, 12), dtype=np.uint8)
    with pytest.raises(ValidationError, match="empty ground-truth"):
        semipl_loss(fw, [empty])


def test_semipl_rejects_batch_mismatch():
    fw = _fake_forward(2)
    with pytest.raises(ValidationError):
        semipl_loss(fw, [None])
