import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tsdfreg.volume import (
    GridSpec,
    SemanticVolume,
    TsdfVolume,
    VolumeFormatError,
    flat_index,
    labels_from_bytes,
    labels_to_bytes,
    load_labels,
    load_volume,
    narrow_band,
    sample_trilinear,
    save_labels,
    save_volume,
    unflat_index,
    volume_from_bytes,
    volume_to_bytes,
    world_to_voxel,
)


def random_volume(n=8, seed=0, h=0.04, tau=0.12):
    rng = np.random.default_rng(seed)
    spec = GridSpec((n, n + 1, n + 2), (0.1, -0.2, 0.3), h, tau)
    return TsdfVolume(spec, rng.uniform(-tau, tau, spec.dims).astype(np.float32))


def test_gridspec_invariants():
    with pytest.raises(ValueError):
        GridSpec((1, 4, 4), (0, 0, 0), 0.1, 0.3)
    with pytest.raises(ValueError):
        GridSpec((4, 4, 4), (0, 0, 0), 0.0, 0.3)
    with pytest.raises(ValueError):
        GridSpec((4, 4, 4), (0, 0, 0), 0.1, 0.05)
    spec = GridSpec((4, 5, 6), (1, 2, 3), 0.1, 0.3)
    assert GridSpec.from_dict(spec.to_dict()) == spec
    assert spec.n_voxels == 120


def test_volume_rejects_out_of_range_values():
    spec = GridSpec((3, 3, 3), (0, 0, 0), 0.1, 0.3)
    with pytest.raises(ValueError):
        TsdfVolume(spec, np.full(spec.dims, 0.31))
    with pytest.raises(ValueError):
        TsdfVolume(spec, np.zeros(spec.dims), weights=-np.ones(spec.dims))
    with pytest.raises(ValueError):
        SemanticVolume(spec, np.full(spec.dims, 3))


def test_world_to_voxel_examples():
    s = GridSpec((4, 4, 4), (0, 0, 0), 0.04, 0.12)
    assert np.allclose(world_to_voxel(s, (0.04, 0.08, 0.12)), (1, 2, 3))
    assert np.array_equal(world_to_voxel(s, s.origin), (0, 0, 0))
    s2 = GridSpec((4, 4, 4), (-1, 0, 0), 0.5, 0.5)
    assert np.array_equal(world_to_voxel(s2, (0, 0, 0)), (2, 0, 0))


def test_flat_index_is_x_fastest():
    spec = GridSpec((3, 4, 5), (0, 0, 0), 1.0, 1.0)
    ijk = np.array([[1, 2, 3], [2, 0, 4]])
    idx = flat_index(spec, ijk)
    assert list(idx) == [1 + 3 * (2 + 4 * 3), 2 + 3 * (0 + 4 * 4)]
    assert np.array_equal(unflat_index(spec, idx), ijk)


def test_trilinear_constant_and_ramp():
    spec = GridSpec((5, 5, 5), (0, 0, 0), 0.1, 1.0)
    c = TsdfVolume(spec, np.full(spec.dims, 0.25))
    assert sample_trilinear(c, (0.13, 0.27, 0.31)) == pytest.approx(0.25, abs=1e-15)
    x = spec.centers()[..., 0]
    ramp = TsdfVolume(spec, 2.0 * x)
    for p in [(0.13, 0.27, 0.31), (0.0, 0.0, 0.0), (0.4, 0.4, 0.4), (0.399, 0.05, 0.2)]:
        assert sample_trilinear(ramp, p) == pytest.approx(2.0 * p[0], abs=1e-14)
    assert sample_trilinear(ramp, (0.41, 0.2, 0.2)) is None
    assert sample_trilinear(ramp, (-0.01, 0.2, 0.2)) is None


def test_trilinear_at_centers_returns_stored_value():
    vol = random_volume(6, seed=3)
    P = vol.spec.centers()
    for ijk in [(0, 0, 0), (5, 6, 7), (2, 3, 4)]:
        assert sample_trilinear(vol, P[ijk]) == pytest.approx(float(vol.values[ijk]), abs=1e-12)


def test_volume_round_trip_bit_exact(tmp_path):
    vol = random_volume()
    p = tmp_path / "v.fvol"
    save_volume(vol, p)
    back = load_volume(p)
    assert back.spec == vol.spec
    assert np.array_equal(back.values.view(np.uint32), vol.values.view(np.uint32))
    save_volume(back, tmp_path / "w.fvol")
    assert p.read_bytes() == (tmp_path / "w.fvol").read_bytes()


def test_volume_header_layout():
    vol = random_volume(4)
    buf = volume_to_bytes(vol)
    magic, version, nx, ny, nz = struct.unpack_from("<4sIIII", buf)
    assert (magic, version, (nx, ny, nz)) == (b"FVOL", 1, vol.spec.dims)
    ox, oy, oz, h, tau = struct.unpack_from("<5d", buf, 20)
    assert (ox, oy, oz, h, tau) == (*vol.spec.origin, vol.spec.voxel_size, vol.spec.truncation)
    payload = np.frombuffer(buf, "<f4", offset=60)
    # x-fastest: second element is voxel (1, 0, 0)
    assert payload[1] == vol.values[1, 0, 0]
    assert payload[vol.spec.dims[0]] == vol.values[0, 1, 0]


def test_malformed_files_rejected():
    buf = volume_to_bytes(random_volume(4))
    with pytest.raises(VolumeFormatError, match="magic"):
        volume_from_bytes(b"XVOL" + buf[4:])
    with pytest.raises(VolumeFormatError, match="payload"):
        volume_from_bytes(buf[:-4])
    with pytest.raises(VolumeFormatError):
        volume_from_bytes(buf[:10])
    with pytest.raises(VolumeFormatError, match="version"):
        volume_from_bytes(buf[:4] + struct.pack("<I", 2) + buf[8:])


def test_labels_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    spec = GridSpec((4, 5, 6), (0, 0, 0), 0.1, 0.3)
    sem = SemanticVolume(spec, rng.choice([0, 1, 2, 255], size=spec.dims))
    save_labels(sem, tmp_path / "s.fsem")
    back = load_labels(tmp_path / "s.fsem")
    assert np.array_equal(back.labels, sem.labels)
    bad = bytearray(labels_to_bytes(sem))
    bad[-1] = 7
    with pytest.raises(VolumeFormatError):
        labels_from_bytes(bytes(bad))


def test_narrow_band_examples():
    spec = GridSpec((6, 6, 8), (0, 0, 0), 0.1, 0.3)
    full = TsdfVolume(spec, np.full(spec.dims, 0.3))
    assert narrow_band(full, 0.1).size == 0
    z = spec.centers()[..., 2]
    z0 = 0.33
    plane = TsdfVolume(spec, np.clip(z - z0, -0.3, 0.3))
    idx = narrow_band(plane, 0.1)
    ijk = unflat_index(spec, idx)
    assert set(ijk[:, 2]) == {3, 4}  # |z - 0.33| < 0.1 at z = 0.3, 0.4
    assert len(idx) == 4 * 4 * 2


def test_narrow_band_matches_scan():
    vol = random_volume(8, seed=5)
    band = 0.05
    expect = []
    nx, ny, nz = vol.spec.dims
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                inner = 0 < i < nx - 1 and 0 < j < ny - 1 and 0 < k < nz - 1
                if inner and abs(float(vol.values[i, j, k])) < band:
                    expect.append(i + nx * (j + ny * k))
    assert list(narrow_band(vol, band)) == expect


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.001, 0.12), st.floats(0.001, 0.12))
def test_narrow_band_monotone(seed, b1, b2):
    vol = random_volume(5, seed=seed)
    lo, hi = sorted((b1, b2))
    assert set(narrow_band(vol, lo)) <= set(narrow_band(vol, hi))
