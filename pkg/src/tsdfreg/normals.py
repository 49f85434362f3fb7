"""Per-voxel TSDF gradients and unit normals.

The gradient is the fixed central-difference stencil, i.e. a frozen 3x3x3
convolution per axis with ``+-1/(2h)`` on the two axis neighbours.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .volume import GridSpec, TsdfVolume, interior_mask, vectors_from_bytes, vectors_to_bytes

DEFAULT_EPS = 1e-8


@dataclass(frozen=True)
class VectorField:
    spec: GridSpec
    vectors: np.ndarray  # (nx, ny, nz, 3)
    valid: np.ndarray    # (nx, ny, nz) bool


@dataclass(frozen=True)
class NormalField:
    spec: GridSpec
    normals: np.ndarray  # (nx, ny, nz, 3), unit length where valid
    valid: np.ndarray


def central_difference(f: np.ndarray, h: float) -> np.ndarray:
    """Central differences of a 3D array; the one-voxel boundary shell is 0."""
    g = np.zeros(f.shape + (3,), dtype=np.float64)
    inv = 1.0 / (2.0 * h)
    g[1:-1, 1:-1, 1:-1, 0] = (f[2:, 1:-1, 1:-1] - f[:-2, 1:-1, 1:-1]) * inv
    g[1:-1, 1:-1, 1:-1, 1] = (f[1:-1, 2:, 1:-1] - f[1:-1, :-2, 1:-1]) * inv
    g[1:-1, 1:-1, 1:-1, 2] = (f[1:-1, 1:-1, 2:] - f[1:-1, 1:-1, :-2]) * inv
    return g


def central_difference_adjoint(dg: np.ndarray, h: float) -> np.ndarray:
    """Transpose of :func:`central_difference`: maps d/dgrad to d/df."""
    out = np.zeros(dg.shape[:3], dtype=np.float64)
    inv = 1.0 / (2.0 * h)
    d = dg[1:-1, 1:-1, 1:-1] * inv
    out[2:, 1:-1, 1:-1] += d[..., 0]
    out[:-2, 1:-1, 1:-1] -= d[..., 0]
    out[1:-1, 2:, 1:-1] += d[..., 1]
    out[1:-1, :-2, 1:-1] -= d[..., 1]
    out[1:-1, 1:-1, 2:] += d[..., 2]
    out[1:-1, 1:-1, :-2] -= d[..., 2]
    return out


def vector_norm(v: np.ndarray) -> np.ndarray:
    # explicit sum order so per-voxel oracles can reproduce it bit-for-bit
    return np.sqrt(v[..., 0] * v[..., 0] + v[..., 1] * v[..., 1] + v[..., 2] * v[..., 2])


def gradient_central(vol: TsdfVolume) -> VectorField:
    f = np.asarray(vol.values, dtype=np.float64)
    g = central_difference(f, vol.spec.voxel_size)
    return VectorField(vol.spec, g, interior_mask(vol.spec.dims))


def normalize_field(g: VectorField, eps: float = DEFAULT_EPS) -> NormalField:
    """Unit normals ``g / max(|g|, eps)``; entries with ``|g| < eps`` are invalid."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    r = vector_norm(g.vectors)
    valid = g.valid & (r >= eps)
    n = g.vectors / np.maximum(r, eps)[..., None]
    n[~valid] = 0.0
    return NormalField(g.spec, n, valid)


def raw_normal_field(g: VectorField, eps: float = DEFAULT_EPS) -> NormalField:
    """Un-normalized gradients used as normals (comparison mode)."""
    r = vector_norm(g.vectors)
    valid = g.valid & (r >= eps)
    n = np.where(valid[..., None], g.vectors, 0.0)
    return NormalField(g.spec, n, valid)


def tsdf_normals(vol: TsdfVolume, eps: float = DEFAULT_EPS) -> NormalField:
    return normalize_field(gradient_central(vol), eps)


def save_vectors(field, path) -> None:
    """Debug dump of a vector/normal field; invalid entries are written as NaN."""
    v = field.normals if isinstance(field, NormalField) else field.vectors
    v = np.where(field.valid[..., None], v, np.nan)
    Path(path).write_bytes(vectors_to_bytes(field.spec, v))


def load_normals(path) -> NormalField:
    spec, v = vectors_from_bytes(Path(path).read_bytes())
    valid = np.all(np.isfinite(v), axis=-1)
    v = np.where(valid[..., None], v, 0.0).astype(np.float64)
    return NormalField(spec, v, valid)
