import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from tsdfreg.evalkit import (
    DepthMap,
    MetricsReport,
    PinholeCamera,
    coverage,
    evaluate_protocol,
    fscore,
    fuse_depths,
    load_cameras,
    load_depth,
    look_at,
    mask_depth,
    point_metrics,
    render_depth,
    save_cameras,
    save_depth,
)
from tsdfreg.surface import TriangleMesh, empty_mesh, marching_cubes
from tsdfreg.synth import SceneSpec, generate_room
from tsdfreg.volume import GridSpec


def quad(x0, x1, y0, y1, z):
    v = np.array([(x0, y0, z), (x1, y0, z), (x1, y1, z), (x0, y1, z)], float)
    return TriangleMesh(v, [[0, 1, 2], [0, 2, 3]])


def box_mesh(size, R, t):
    sx, sy, sz = np.asarray(size) / 2
    corners = np.array([(x, y, z) for x in (-sx, sx) for y in (-sy, sy) for z in (-sz, sz)])
    faces = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    tris = [t_ for a, b, c, d in faces for t_ in ((a, b, c), (a, c, d))]
    return TriangleMesh(corners @ R.T + t, tris)


def camera(w=64, h=48, f=40.0, pose=None):
    return PinholeCamera(f, f, (w - 1) / 2, (h - 1) / 2, w, h, pose)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    return q if np.linalg.det(q) > 0 else -q


def test_camera_validation_and_json(tmp_path):
    with pytest.raises(ValueError):
        PinholeCamera(0.0, 1.0, 0, 0)
    bad = np.eye(4)
    bad[0, 0] = 1.1
    with pytest.raises(ValueError):
        PinholeCamera(1.0, 1.0, 0, 0, pose=bad)
    cams = [camera(pose=look_at((1, 2, 3), (0, 0, 0))), camera(32, 16)]
    save_cameras(cams, tmp_path / "c.json")
    back = load_cameras(tmp_path / "c.json")
    for a, b in zip(cams, back):
        assert np.array_equal(a.pose, b.pose) and a.to_dict() == b.to_dict()


def test_depth_round_trip_and_errors(tmp_path):
    d = np.random.default_rng(0).uniform(0, 5, (7, 9)).astype(np.float32)
    save_depth(DepthMap(9, 7, d), tmp_path / "d.fdep")
    back = load_depth(tmp_path / "d.fdep")
    assert (back.width, back.height) == (9, 7) and np.array_equal(back.depth, d)
    (tmp_path / "x.fdep").write_bytes(b"FDEP" + b"\0" * 3)
    with pytest.raises(ValueError):
        load_depth(tmp_path / "x.fdep")


def test_empty_mesh_renders_nothing():
    assert not render_depth(empty_mesh(), camera()).valid.any()


def test_frontal_plane_depth():
    dm = render_depth(quad(-10, 10, -10, 10, 2.0), camera())
    assert dm.valid.all()
    assert np.max(np.abs(dm.depth - 2.0)) <= 1e-5


def test_max_depth_cut():
    dm = render_depth(quad(-10, 10, -10, 10, 2.0), camera(), max_depth=1.5)
    assert not dm.valid.any()


@pytest.mark.parametrize("seed", range(3))
def test_random_box_matches_raycast(seed):
    rng = np.random.default_rng(seed)
    mesh = box_mesh(rng.uniform(0.5, 1.5, 3), random_rotation(rng), (rng.uniform(-0.3, 0.3),
                    rng.uniform(-0.3, 0.3), rng.uniform(2.5, 3.5)))
    cam = camera(40, 30, 30.0)
    dm = render_depth(mesh, cam)
    V, T = mesh.vertices, mesh.triangles
    o = np.zeros(3)
    for v in range(cam.height):
        for u in range(cam.width):
            d = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
            hits = [oracles.ray_triangle(o, d, *V[t]) for t in T]
            hits = [x for x in hits if x is not None]
            if hits:
                # direction has unit z, so the ray parameter is the depth
                assert dm.depth[v, u] == pytest.approx(min(hits), abs=1e-4)
            else:
                assert dm.depth[v, u] == 0.0


def test_mask_examples():
    rng = np.random.default_rng(1)
    pred = DepthMap(8, 6, rng.uniform(0.5, 3, (6, 8)))
    full = DepthMap(8, 6, np.ones((6, 8)))
    none = DepthMap(8, 6, np.zeros((6, 8)))
    assert np.array_equal(mask_depth(pred, full).depth, pred.depth)
    assert not mask_depth(pred, none).valid.any()
    checker = DepthMap(8, 6, (np.indices((6, 8)).sum(axis=0) % 2).astype(float))
    assert np.count_nonzero(mask_depth(pred, checker).valid) == 24
    with pytest.raises(ValueError):
        mask_depth(pred, DepthMap(6, 8, np.ones((8, 6))))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_masking_never_adds_pixels(seed):
    rng = np.random.default_rng(seed)
    pred = DepthMap(5, 4, rng.uniform(0, 2, (4, 5)) * (rng.random((4, 5)) < 0.5))
    gt = DepthMap(5, 4, rng.uniform(0, 2, (4, 5)) * (rng.random((4, 5)) < 0.5))
    m = mask_depth(pred, gt)
    assert np.count_nonzero(m.valid) <= np.count_nonzero(pred.valid)
    assert np.count_nonzero(m.valid) <= np.count_nonzero(gt.valid)


def plane_frame():
    cam = camera(48, 48, 30.0)
    dm = render_depth(quad(-10, 10, -10, 10, 2.0), cam)
    spec = GridSpec((10, 10, 12), (-0.3, -0.3, 1.6), 0.07, 0.21)
    return cam, dm, spec


def test_fusion_plane_zero_crossing():
    cam, dm, spec = plane_frame()
    vol = fuse_depths([dm], [cam], spec)
    mesh = marching_cubes(vol, mask=vol.weights > 0)
    assert not mesh.is_empty
    assert np.max(np.abs(mesh.vertices[:, 2] - 2.0)) <= spec.voxel_size


def test_fusion_without_observations():
    cam, dm, spec = plane_frame()
    empty = DepthMap(dm.width, dm.height, np.zeros_like(dm.depth))
    vol = fuse_depths([empty], [cam], spec)
    assert np.all(vol.values == spec.truncation) and np.all(vol.weights == 0)
    with pytest.raises(ValueError):
        fuse_depths([dm, dm], [cam], spec)


def test_fusing_same_frame_twice():
    cam, dm, spec = plane_frame()
    once = fuse_depths([dm], [cam], spec)
    twice = fuse_depths([dm, dm], [cam, cam], spec)
    assert np.array_equal(once.values, twice.values)
    assert np.array_equal(twice.weights, 2 * once.weights)


def test_coverage_examples():
    cam = camera()
    assert coverage(quad(-10, 10, -10, 10, 2.0), [cam]) == 100.0
    assert coverage(empty_mesh(), [cam]) == 0.0
    # pixel centers sit at integer u; cx = 31.5 splits the 64 columns evenly
    half = coverage(quad(-10, 0, -10, 10, 2.0), [cam])
    assert abs(half - 50.0) <= 100.0 / (cam.width * cam.height)


def test_coverage_permutation_invariant():
    rng = np.random.default_rng(4)
    mesh = box_mesh((1, 2, 1.5), random_rotation(rng), (0, 0, 0))
    cams = [camera(pose=look_at(3 * rng.normal(size=3), rng.normal(size=3) * 0.2)) for _ in range(5)]
    a = coverage(mesh, cams)
    for _ in range(3):
        perm = [cams[i] for i in rng.permutation(len(cams))]
        assert coverage(mesh, perm) == a


@pytest.mark.parametrize("seed", range(2))
def test_point_metrics_equal_brute_force(seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0, 1, (500, 3))
    g = rng.uniform(0, 1, (500, 3)) + 0.02
    got = point_metrics(p, g, threshold=0.05)
    assert got == oracles.point_metrics(p, g, 0.05)


def test_point_metrics_identity_and_errors():
    p = np.random.default_rng(2).uniform(0, 1, (100, 3))
    assert point_metrics(p, p) == (0.0, 0.0, 100.0, 100.0, 100.0)
    with pytest.raises(ValueError):
        point_metrics(np.zeros((0, 3)), p)


def test_fscore_examples():
    assert fscore(60.0, 40.0) == pytest.approx(48.0, abs=1e-12)
    assert fscore(0.0, 0.0) == 0.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 0.5))
def test_point_metrics_swap_and_bounds(seed, thr):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0, 1, (60, 3))
    g = rng.uniform(0, 1, (40, 3))
    acc, comp, prec, rec, f = point_metrics(p, g, thr)
    acc2, comp2, prec2, rec2, f2 = point_metrics(g, p, thr)
    assert (acc, comp, prec, rec) == (comp2, acc2, rec2, prec2)
    assert f == pytest.approx(f2, abs=1e-12)
    if prec > 0 and rec > 0:
        assert min(prec, rec) - 1e-12 <= f <= max(prec, rec) + 1e-12


def test_report_dict_maps_infinity_to_null():
    r = MetricsReport(math.inf, math.inf, 0.0, 0.0, 0.0, 12.5)
    assert r.to_dict()["acc_cm"] is None and r.to_dict()["coverage_pct"] == 12.5


@pytest.fixture(scope="module")
def room():
    return generate_room(SceneSpec(extents=(2.4, 2.0, 2.0), voxel_size=0.08, seed=3))


def test_self_evaluation_is_near_perfect(room):
    r = evaluate_protocol(room.gt_mesh, room.gt_mesh, room.cameras, room.gt_tsdf.spec,
                          n_sample=50_000)
    assert r.prec_pct >= 99.0 and r.recall_pct >= 99.0
    assert r.coverage_pct == coverage(room.gt_mesh, room.cameras)


def test_deleted_wall_lowers_recall_and_coverage(room):
    full = evaluate_protocol(room.gt_mesh, room.gt_mesh, room.cameras, room.gt_tsdf.spec,
                             n_sample=50_000)
    V, T = room.gt_mesh.vertices, room.gt_mesh.triangles
    # drop the wall at x = 0 (every vertex of the triangle on that plane)
    keep = ~np.all(np.abs(V[T][:, :, 0]) < 1e-6, axis=1)
    assert 0 < np.count_nonzero(~keep) < len(T)
    cut = TriangleMesh(V, T[keep])
    r = evaluate_protocol(cut, room.gt_mesh, room.cameras, room.gt_tsdf.spec, n_sample=50_000)
    assert r.recall_pct < full.recall_pct
    assert r.coverage_pct < full.coverage_pct
