import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from tsdfreg.losses import (
    LossBreakdown,
    LossWeights,
    compose_total,
    grad_total,
    loss_data,
    loss_eikonal,
    loss_fawn,
    loss_floor,
    loss_masks,
    loss_normal_supervised,
    loss_walls,
    total_loss,
)
from tsdfreg.normals import NormalField, gradient_central, tsdf_normals
from tsdfreg.volume import GridSpec, SemanticVolume, TsdfVolume, narrow_band

H = 0.04
TAU = 3 * H


def instance(n=8, seed=0, weights=True):
    rng = np.random.default_rng(seed)
    spec = GridSpec((n, n, n), (0.0, 0.0, 0.0), H, TAU)
    vol = TsdfVolume(spec, rng.uniform(-TAU, TAU, spec.dims))
    w = rng.uniform(0, 2, spec.dims) if weights else None
    obs = TsdfVolume(spec, rng.uniform(-TAU, TAU, spec.dims), w)
    sem = SemanticVolume(spec, rng.choice([0, 1, 2, 255], spec.dims))
    gt = tsdf_normals(TsdfVolume(spec, rng.uniform(-TAU, TAU, spec.dims)))
    return vol, obs, sem, gt


def normals_from(vectors, labels):
    """Normal field on a 1 x 1 x n strip with every voxel valid."""
    v = np.asarray(vectors, float).reshape(1, 1, -1, 3)
    spec = GridSpec((2, 2, v.shape[2] if v.shape[2] > 1 else 2), (0, 0, 0), 1.0, 1.0)
    n = np.zeros(spec.dims + (3,))
    n[0, 0, : v.shape[2]] = v[0, 0]
    valid = np.zeros(spec.dims, bool)
    valid[0, 0, : v.shape[2]] = True
    lab = np.full(spec.dims, 255, np.uint8)
    lab[0, 0, : v.shape[2]] = labels
    return NormalField(spec, n, valid), SemanticVolume(spec, lab), np.ones(spec.dims, bool)


def test_floor_and_walls_examples():
    n, sem, band = normals_from([(0, 0, 1), (0.6, 0, 0.8)], [1, 1])
    assert loss_floor(n, sem, band) == pytest.approx(0.3, abs=1e-16)
    s = math.sqrt(2) / 2
    n, sem, band = normals_from([(s, 0, s), (0, s, s), (-s, 0, -s)], [2, 2, 2])
    assert loss_walls(n, sem, band) == pytest.approx(s, abs=1e-15)
    n, sem, band = normals_from([(1, 0, 0), (0, 1, 0)], [2, 2])
    assert loss_walls(n, sem, band) == 0.0


def test_fawn_is_sum_and_empty_is_zero():
    n, sem, band = normals_from([(0.6, 0, 0.8), (0.8, 0, 0.6), (0, 0.6, 0.8), (0.6, 0, 0.8)],
                                [1, 2, 2, 1])
    fl, wa, tot = loss_fawn(n, sem, band)
    assert fl == pytest.approx(0.6) and wa == pytest.approx(0.7)
    assert tot == wa + fl
    n, sem, band = normals_from([(0.6, 0, 0.8)], [0])
    assert loss_fawn(n, sem, band) == (0.0, 0.0, 0.0)


def test_supervised_examples():
    vol, _, _, _ = instance(6, seed=1)
    n = tsdf_normals(vol)
    band = np.ones(vol.spec.dims, bool)
    cos, euc = loss_normal_supervised(n, n, band)
    assert abs(cos) < 1e-15 and euc == 0.0
    neg = NormalField(n.spec, -n.normals, n.valid)
    cos, euc = loss_normal_supervised(n, neg, band)
    assert cos == pytest.approx(2.0, abs=1e-12) and euc == pytest.approx(2.0, abs=1e-12)


def test_eikonal_examples():
    spec = GridSpec((6, 6, 6), (0, 0, 0), 0.1, 2.0)
    z = spec.centers()[..., 2]
    band = narrow_band(TsdfVolume(spec, z - 0.25), 10.0)
    assert loss_eikonal(gradient_central(TsdfVolume(spec, z - 0.25)), band) < 1e-24
    assert loss_eikonal(gradient_central(TsdfVolume(spec, 2 * z - 0.5)), band) == pytest.approx(1.0, abs=1e-12)


def test_data_examples():
    vol, obs, _, _ = instance(6, seed=2, weights=False)
    assert loss_data(obs, obs) == 0.0
    shifted = TsdfVolume(obs.spec, np.clip(obs.values, -TAU + 0.01, TAU - 0.01))
    c = 0.01
    moved = TsdfVolume(obs.spec, shifted.values + c)
    assert loss_data(moved, shifted) == pytest.approx(c * c, rel=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_terms_equal_brute_force(seed):
    vol, obs, sem, gt = instance(8, seed=seed)
    f = vol.values
    n = tsdf_normals(vol)
    band = narrow_band(vol, 2 * H)
    fl, wa = oracles.floor_walls(f, sem.labels, H, 2 * H)
    assert loss_floor(n, sem, band) == fl
    assert loss_walls(n, sem, band) == wa
    assert loss_normal_supervised(n, gt, band) == oracles.supervised(f, gt.normals, gt.valid, H, 2 * H)
    assert loss_eikonal(gradient_central(vol), narrow_band(vol, 3 * H)) == oracles.eikonal(f, H, 3 * H)
    assert loss_data(vol, obs) == oracles.data(f, obs.values, obs.weights)


def test_total_recomposes_terms():
    vol, obs, sem, gt = instance(8, seed=4)
    lw = LossWeights(1e-3, 1e-4, 1.0)
    bd = total_loss(vol, obs, sem, gt, lw)
    n = tsdf_normals(vol)
    fl, wa, fw = loss_fawn(n, sem, narrow_band(vol, H))
    cos, euc = loss_normal_supervised(n, gt, narrow_band(vol, H))
    eik = loss_eikonal(gradient_central(vol), narrow_band(vol, 3 * H))
    dat = loss_data(vol, obs)
    assert (bd.floor, bd.walls, bd.fawn) == (fl, wa, fw)
    assert (bd.norm_cosine, bd.norm_euclid, bd.eikonal, bd.data) == (cos, euc, eik, dat)
    assert bd.total == dat + 1e-4 * (cos + euc + eik) + 1e-3 * fw


def test_total_with_unit_terms_uses_default_weights():
    unit = LossBreakdown(floor=0.5, walls=0.5, fawn=1.0, norm_cosine=1.0, norm_euclid=1.0,
                         eikonal=1.0, data=1.0)
    lw = LossWeights()
    assert (lw.lambda_fawn, lw.lambda_norm, lw.lambda_data) == (1e-3, 1e-4, 1.0)
    assert compose_total(unit, lw) == pytest.approx(1.0 + 3e-4 + 1e-3, rel=1e-15)


def test_data_only_fixed_point_and_gradient():
    vol, obs, sem, gt = instance(6, seed=5)
    only = LossWeights(0.0, 0.0, 1.0)
    assert total_loss(obs, obs, sem, gt, only).total == 0.0
    g = grad_total(vol, obs, sem, gt, only)
    w = obs.weights
    assert np.allclose(g, 2 * w * (vol.values - obs.values) / w.sum(), rtol=1e-12, atol=0)
    zero = grad_total(vol, obs, sem, gt, LossWeights(0.0, 0.0, 0.0))
    assert np.all(zero == 0.0)


def test_breakdown_json_round_trip():
    vol, obs, sem, gt = instance(6, seed=6)
    bd = total_loss(vol, obs, sem, gt, LossWeights())
    d = bd.to_dict()
    assert set(d) >= {"floor", "walls", "fawn", "norm_cosine", "norm_euclid", "eikonal", "data", "total"}
    assert LossBreakdown.from_dict(d) == bd


def test_gradient_matches_finite_differences_small():
    vol, obs, sem, gt = instance(6, seed=7)
    f = np.array(vol.values)
    lw = LossWeights(1e-3, 1e-4, 1.0)
    masks = loss_masks(vol, obs, sem, gt, lw)
    g = grad_total(vol, obs, sem, gt, lw)
    ev = lambda x: total_loss(TsdfVolume(vol.spec, x), obs, sem, gt, lw, masks=masks).total
    delta = 1e-6 * H
    fd = oracles.finite_difference(ev, f, delta)
    floor_ = 4 * np.finfo(float).eps * abs(ev(f)) / delta
    assert np.all(np.abs(g - fd) <= 1e-5 * np.maximum(np.abs(g), np.abs(fd)) + floor_)


def test_raw_mode_differs_and_is_scale_sensitive():
    vol, obs, sem, gt = instance(6, seed=8)
    a = total_loss(vol, obs, sem, gt, LossWeights(), normal_mode="raw")
    b = total_loss(vol, obs, sem, gt, LossWeights())
    assert a.walls != b.walls
    with pytest.raises(ValueError):
        total_loss(vol, obs, sem, gt, LossWeights(), normal_mode="sobel")


def test_quarter_turn_about_z_preserves_fawn():
    vol, obs, sem, _ = instance(8, seed=9)
    rot = lambda a: np.rot90(a, 1, axes=(0, 1))
    spec = vol.spec
    r_vol = TsdfVolume(spec, rot(vol.values))
    r_sem = SemanticVolume(spec, rot(sem.labels))
    band, r_band = narrow_band(vol, H), narrow_band(r_vol, H)
    fl, wa, _ = loss_fawn(tsdf_normals(vol), sem, band)
    rfl, rwa, _ = loss_fawn(tsdf_normals(r_vol), r_sem, r_band)
    assert abs(fl - rfl) <= 1e-12 and abs(wa - rwa) <= 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.2, 0.99))
def test_scaling_leaves_normal_terms(seed, alpha):
    vol, obs, sem, gt = instance(6, seed=seed)
    scaled = TsdfVolume(vol.spec, alpha * vol.values)
    lw = LossWeights()
    masks = loss_masks(vol, obs, sem, gt, lw)  # same voxel sets for both
    a = total_loss(vol, obs, sem, gt, lw, masks=masks)
    b = total_loss(scaled, obs, sem, gt, lw, masks=masks)
    for k in ("floor", "walls", "fawn", "norm_cosine"):
        assert abs(getattr(a, k) - getattr(b, k)) <= 1e-9


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_terms_nonnegative(seed):
    vol, obs, sem, gt = instance(5, seed=seed)
    bd = total_loss(vol, obs, sem, gt, LossWeights())
    for k in ("floor", "walls", "fawn", "norm_cosine", "norm_euclid", "eikonal", "data", "total"):
        assert getattr(bd, k) >= 0.0
