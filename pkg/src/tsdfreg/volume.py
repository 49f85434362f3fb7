"""Voxel grids: placement metadata, TSDF / label volumes, sampling and I/O.

Arrays are held with shape ``(nx, ny, nz)`` and indexed ``[i, j, k]``.  The
flat voxel index used everywhere (band sets, files) is x-fastest:
``i + nx * (j + ny * k)``, i.e. Fortran order of the in-memory array.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

LABEL_OTHER = 0
LABEL_FLOOR = 1
LABEL_WALLS = 2
LABEL_UNKNOWN = 255
VALID_LABELS = (LABEL_OTHER, LABEL_FLOOR, LABEL_WALLS, LABEL_UNKNOWN)

FORMAT_VERSION = 1
# magic, version, nx, ny, nz, origin xyz, voxel_size, truncation
_HEADER = struct.Struct("<4sIIII3ddd")

# values that went through a float32 round trip may sit one ulp above tau
_F32_SLACK = 2.0 ** -23

PathLike = Union[str, Path]


class VolumeFormatError(ValueError):
    """Malformed or inconsistent volume file."""


@dataclass(frozen=True)
class GridSpec:
    """Placement of a regular voxel grid in world space (meters).

    ``origin`` is the world position of the *center* of voxel (0, 0, 0).
    """

    dims: Tuple[int, int, int]
    origin: Tuple[float, float, float]
    voxel_size: float
    truncation: float

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(origin) != 3:
            raise ValueError("dims and origin must have 3 components")
        if min(dims) < 2:
            raise ValueError(f"every grid dimension must be >= 2, got {dims}")
        h, tau = float(self.voxel_size), float(self.truncation)
        if not (h > 0 and math.isfinite(h)):
            raise ValueError(f"voxel_size must be positive, got {h}")
        if not (tau >= h and math.isfinite(tau)):
            raise ValueError(f"truncation must be >= voxel_size, got {tau} < {h}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "voxel_size", h)
        object.__setattr__(self, "truncation", tau)

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def centers(self) -> np.ndarray:
        """World coordinates of all voxel centers, shape (nx, ny, nz, 3)."""
        axes = [self.origin[a] + self.voxel_size * np.arange(self.dims[a]) for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "origin": list(self.origin),
            "voxel_size": self.voxel_size,
            "truncation": self.truncation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(tuple(d["dims"]), tuple(d["origin"]), d["voxel_size"], d["truncation"])


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class TsdfVolume:
    """Truncated signed distances in meters, negative inside solids."""

    spec: GridSpec
    values: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.asarray(self.values)
        dtype = values.dtype if values.dtype in (np.float32, np.float64) else np.float64
        values = _frozen(values, dtype)
        if values.shape != self.spec.dims:
            raise ValueError(f"values shape {values.shape} != grid dims {self.spec.dims}")
        if not np.all(np.isfinite(values)):
            raise ValueError("TSDF values must be finite")
        tau = self.spec.truncation
        if np.any(np.abs(values) > tau * (1.0 + _F32_SLACK)):
            raise ValueError("TSDF values must lie in [-truncation, +truncation]")
        object.__setattr__(self, "values", values)
        if self.weights is not None:
            w = _frozen(self.weights, np.float64)
            if w.shape != self.spec.dims:
                raise ValueError("weights shape does not match grid dims")
            if np.any(~np.isfinite(w)) or np.any(w < 0):
                raise ValueError("weights must be finite and non-negative")
            object.__setattr__(self, "weights", w)

    def effective_weights(self) -> np.ndarray:
        if self.weights is None:
            return np.ones(self.spec.dims)
        return self.weights

    def with_values(self, values: np.ndarray) -> "TsdfVolume":
        return TsdfVolume(self.spec, values, self.weights)


@dataclass(frozen=True)
class SemanticVolume:
    """Per-voxel class label: 0 other, 1 floor, 2 walls, 255 unknown."""

    spec: GridSpec
    labels: np.ndarray = field(repr=False)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.shape != self.spec.dims:
            raise ValueError(f"labels shape {labels.shape} != grid dims {self.spec.dims}")
        if not np.all(np.isin(labels, VALID_LABELS)):
            raise ValueError("labels must be one of 0, 1, 2, 255")
        object.__setattr__(self, "labels", _frozen(labels, np.uint8))


def check_same_grid(*specs: GridSpec) -> None:
    first = specs[0]
    for s in specs[1:]:
        if s != first:
            raise ValueError(f"grid mismatch: {first} vs {s}")


def flat_index(spec: GridSpec, ijk: np.ndarray) -> np.ndarray:
    """x-fastest linear index of integer voxel coordinates (..., 3)."""
    ijk = np.asarray(ijk)
    nx, ny, _ = spec.dims
    return ijk[..., 0] + nx * (ijk[..., 1] + ny * ijk[..., 2])


def unflat_index(spec: GridSpec, idx: np.ndarray) -> np.ndarray:
    return np.stack(np.unravel_index(np.asarray(idx), spec.dims, order="F"), axis=-1)


def world_to_voxel(spec: GridSpec, p: Sequence[float]) -> np.ndarray:
    """Continuous voxel coordinates of world point(s) ``p``; no clamping."""
    p = np.asarray(p, dtype=np.float64)
    return (p - np.asarray(spec.origin)) / spec.voxel_size


_SNAP = 1e-9


def sample_trilinear(vol: TsdfVolume, p: Sequence[float]) -> Optional[float]:
    """Trilinear interpolation at world point ``p``.

    Returns None when any of the eight support voxels falls outside the grid.
    """
    c = world_to_voxel(vol.spec, p)
    if not np.all(np.isfinite(c)):
        return None
    base = []
    frac = []
    for a in range(3):
        n = vol.spec.dims[a]
        ca = float(c[a])
        r = round(ca)
        if abs(ca - r) <= _SNAP:
            ca = float(r)  # voxel centers hit exactly despite (p - o) / h roundoff
        i0 = math.floor(ca)
        t = ca - i0
        if i0 == n - 1 and t == 0.0:
            # exact center of the last voxel layer
            i0, t = n - 2, 1.0
        if i0 < 0 or i0 + 1 > n - 1:
            return None
        base.append(i0)
        frac.append(t)
    i, j, k = base
    tx, ty, tz = frac
    v = vol.values[i:i + 2, j:j + 2, k:k + 2].astype(np.float64)
    vx = v[0] * (1.0 - tx) + v[1] * tx
    vy = vx[0] * (1.0 - ty) + vx[1] * ty
    return float(vy[0] * (1.0 - tz) + vy[1] * tz)


def interior_mask(dims: Tuple[int, int, int]) -> np.ndarray:
    """Voxels whose six axis neighbours are all inside the grid."""
    m = np.zeros(dims, dtype=bool)
    m[1:-1, 1:-1, 1:-1] = True
    return m


def narrow_band_mask(vol: TsdfVolume, band: float) -> np.ndarray:
    if not band > 0:
        raise ValueError("band must be positive")
    return interior_mask(vol.spec.dims) & (np.abs(vol.values) < band)


def narrow_band(vol: TsdfVolume, band: float) -> np.ndarray:
    """Sorted x-fastest indices of interior voxels with ``|f| < band``."""
    return np.flatnonzero(narrow_band_mask(vol, band).ravel(order="F"))


def mask_from_indices(spec: GridSpec, idx: np.ndarray) -> np.ndarray:
    m = np.zeros(spec.n_voxels, dtype=bool)
    m[np.asarray(idx, dtype=np.int64)] = True
    return m.reshape(spec.dims, order="F")


# --------------------------------------------------------------------------
# binary files

def _pack_header(magic: bytes, spec: GridSpec) -> bytes:
    return _HEADER.pack(magic, FORMAT_VERSION, *spec.dims, *spec.origin,
                        spec.voxel_size, spec.truncation)


def _read_header(buf: bytes, magic: bytes) -> Tuple[GridSpec, int]:
    if len(buf) < _HEADER.size:
        raise VolumeFormatError("file too short for header")
    got, version, nx, ny, nz, ox, oy, oz, h, tau = _HEADER.unpack_from(buf)
    if got != magic:
        raise VolumeFormatError(f"bad magic {got!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise VolumeFormatError(f"unsupported version {version}")
    try:
        spec = GridSpec((nx, ny, nz), (ox, oy, oz), h, tau)
    except ValueError as e:
        raise VolumeFormatError(f"invalid grid in header: {e}") from e
    return spec, _HEADER.size


def _payload(buf: bytes, offset: int, spec: GridSpec, dtype: str, count: int = 1) -> np.ndarray:
    n = spec.n_voxels * count
    itemsize = np.dtype(dtype).itemsize
    if len(buf) - offset != n * itemsize:
        raise VolumeFormatError(
            f"payload size mismatch: expected {n * itemsize} bytes, got {len(buf) - offset}")
    return np.frombuffer(buf, dtype=dtype, count=n, offset=offset)


def volume_to_bytes(vol: TsdfVolume) -> bytes:
    payload = np.asarray(vol.values, dtype="<f4").tobytes(order="F")
    return _pack_header(b"FVOL", vol.spec) + payload


def volume_from_bytes(buf: bytes) -> TsdfVolume:
    spec, off = _read_header(buf, b"FVOL")
    data = _payload(buf, off, spec, "<f4").reshape(spec.dims, order="F")
    return TsdfVolume(spec, data.astype(np.float32))


def save_volume(vol: TsdfVolume, path: PathLike) -> None:
    """Write ``vol`` as FVOL; values are stored as float32."""
    Path(path).write_bytes(volume_to_bytes(vol))


def load_volume(path: PathLike) -> TsdfVolume:
    return volume_from_bytes(Path(path).read_bytes())


def save_scalar_field(spec: GridSpec, data: np.ndarray, path: PathLike) -> None:
    """FVOL file for an arbitrary scalar field on ``spec`` (e.g. weights)."""
    payload = np.asarray(data, dtype="<f4").tobytes(order="F")
    Path(path).write_bytes(_pack_header(b"FVOL", spec) + payload)


def load_scalar_field(path: PathLike) -> Tuple[GridSpec, np.ndarray]:
    buf = Path(path).read_bytes()
    spec, off = _read_header(buf, b"FVOL")
    data = _payload(buf, off, spec, "<f4").reshape(spec.dims, order="F")
    return spec, data.astype(np.float32)


def labels_to_bytes(sem: SemanticVolume) -> bytes:
    return _pack_header(b"FSEM", sem.spec) + np.asarray(sem.labels, dtype=np.uint8).tobytes(order="F")


def labels_from_bytes(buf: bytes) -> SemanticVolume:
    spec, off = _read_header(buf, b"FSEM")
    data = _payload(buf, off, spec, "u1").reshape(spec.dims, order="F")
    try:
        return SemanticVolume(spec, data)
    except ValueError as e:
        raise VolumeFormatError(str(e)) from e


def save_labels(sem: SemanticVolume, path: PathLike) -> None:
    Path(path).write_bytes(labels_to_bytes(sem))


def load_labels(path: PathLike) -> SemanticVolume:
    return labels_from_bytes(Path(path).read_bytes())


def vectors_to_bytes(spec: GridSpec, vectors: np.ndarray) -> bytes:
    """FVEC dump: three consecutive float32 payloads (x, y, z components)."""
    parts = [np.asarray(vectors[..., a], dtype="<f4").tobytes(order="F") for a in range(3)]
    return _pack_header(b"FVEC", spec) + b"".join(parts)


def vectors_from_bytes(buf: bytes) -> Tuple[GridSpec, np.ndarray]:
    spec, off = _read_header(buf, b"FVEC")
    flat = _payload(buf, off, spec, "<f4", count=3)
    n = spec.n_voxels
    comps = [flat[a * n:(a + 1) * n].reshape(spec.dims, order="F") for a in range(3)]
    return spec, np.stack(comps, axis=-1).astype(np.float32)
