"""Loss terms of the refinement objective and their exact gradient.

Objective::

    total = lambda_data * data
          + lambda_norm * (norm_cosine + norm_euclid + eikonal)
          + lambda_fawn * (floor + walls)

``floor`` is the mean horizontal-projection length of floor normals,
``walls`` the mean ``|n_z|`` of wall normals.  All sums are exactly rounded
(``math.fsum``) so results do not depend on evaluation order.

Set membership (narrow band, labels, normal validity) is frozen within one
evaluation and is not differentiated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Dict, Optional, Tuple

import numpy as np

from .normals import (
    DEFAULT_EPS,
    NormalField,
    VectorField,
    central_difference,
    central_difference_adjoint,
    vector_norm,
)
from .volume import (
    LABEL_FLOOR,
    LABEL_WALLS,
    SemanticVolume,
    TsdfVolume,
    check_same_grid,
    interior_mask,
    mask_from_indices,
)

NORMAL_MODES = ("normalized", "raw")


@dataclass(frozen=True)
class LossWeights:
    lambda_fawn: float = 1e-3
    lambda_norm: float = 1e-4
    lambda_data: float = 1.0

    def __post_init__(self):
        for name in ("lambda_fawn", "lambda_norm", "lambda_data"):
            v = float(getattr(self, name))
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
            object.__setattr__(self, name, v)


@dataclass
class LossBreakdown:
    floor: float = 0.0
    walls: float = 0.0
    fawn: float = 0.0
    norm_cosine: float = 0.0
    norm_euclid: float = 0.0
    eikonal: float = 0.0
    data: float = 0.0
    total: float = 0.0
    counts: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossBreakdown":
        return cls(**d)


@dataclass(frozen=True)
class LossMasks:
    """Voxel sets over which each term is averaged (boolean grids)."""

    floor: np.ndarray
    walls: np.ndarray
    supervised: np.ndarray
    eikonal: np.ndarray


def _band_mask(spec, band) -> np.ndarray:
    band = np.asarray(band)
    if band.dtype == bool:
        return band
    return mask_from_indices(spec, band)


def _fsum(a: np.ndarray) -> float:
    try:
        return math.fsum(a.tolist())
    except OverflowError:
        return math.inf
    except ValueError:  # inf - inf inside the sum
        return math.nan


def _mean(terms: np.ndarray) -> float:
    if terms.size == 0:
        return 0.0
    return _fsum(terms) / terms.size


# --------------------------------------------------------------------------
# individual terms

def loss_floor(normals: NormalField, sem: SemanticVolume, band) -> float:
    """Mean ``||(n_x, n_y)||`` over valid floor voxels of ``band``."""
    check_same_grid(normals.spec, sem.spec)
    m = _band_mask(normals.spec, band) & (sem.labels == LABEL_FLOOR) & normals.valid
    n = normals.normals[m]
    return _mean(np.sqrt(n[:, 0] * n[:, 0] + n[:, 1] * n[:, 1]))


def loss_walls(normals: NormalField, sem: SemanticVolume, band) -> float:
    """Mean ``|n_z|`` over valid wall voxels of ``band``."""
    check_same_grid(normals.spec, sem.spec)
    m = _band_mask(normals.spec, band) & (sem.labels == LABEL_WALLS) & normals.valid
    return _mean(np.abs(normals.normals[m][:, 2]))


def loss_fawn(normals: NormalField, sem: SemanticVolume, band) -> Tuple[float, float, float]:
    fl = loss_floor(normals, sem, band)
    wa = loss_walls(normals, sem, band)
    return fl, wa, wa + fl


def loss_normal_supervised(pred: NormalField, gt: NormalField, band) -> Tuple[float, float]:
    """(mean ``1 - <n, m>``, mean ``||n - m||``) over band voxels valid in both."""
    check_same_grid(pred.spec, gt.spec)
    m = _band_mask(pred.spec, band) & pred.valid & gt.valid
    n, g = pred.normals[m], gt.normals[m]
    dot = n[:, 0] * g[:, 0] + n[:, 1] * g[:, 1] + n[:, 2] * g[:, 2]
    d = n - g
    return _mean(1.0 - dot), _mean(vector_norm(d))


def loss_eikonal(grad: VectorField, band) -> float:
    m = _band_mask(grad.spec, band) & grad.valid
    r = vector_norm(grad.vectors[m])
    d = r - 1.0
    return _mean(d * d)


def loss_data(vol: TsdfVolume, obs: TsdfVolume) -> float:
    """Weighted mean squared difference; weights come from ``obs``."""
    check_same_grid(vol.spec, obs.spec)
    return _data_term(np.asarray(vol.values, np.float64), np.asarray(obs.values, np.float64),
                      obs.effective_weights())


def _data_term(f, fo, w) -> float:
    wsum = _fsum(w.ravel(order="F"))
    if wsum == 0.0:
        return 0.0
    d = (f - fo).ravel(order="F")
    return _fsum(w.ravel(order="F") * (d * d)) / wsum


# --------------------------------------------------------------------------
# composed objective

def compose_total(bd: LossBreakdown, lw: LossWeights) -> float:
    return (bd.data * lw.lambda_data
            + lw.lambda_norm * (bd.norm_cosine + bd.norm_euclid + bd.eikonal)
            + lw.lambda_fawn * bd.fawn)


class _Problem:
    """Fixed inputs of one objective: observation, labels, GT normals, knobs."""

    def __init__(self, obs, sem, gt_normals, weights, band_fawn, band_eikonal, eps, normal_mode):
        specs = [obs.spec] + [x.spec for x in (sem, gt_normals) if x is not None]
        check_same_grid(*specs)
        if normal_mode not in NORMAL_MODES:
            raise ValueError(f"normal_mode must be one of {NORMAL_MODES}")
        if not (band_fawn > 0 and band_eikonal > 0):
            raise ValueError("band widths must be positive")
        self.spec = obs.spec
        self.h = obs.spec.voxel_size
        self.obs = np.asarray(obs.values, np.float64)
        self.w = obs.effective_weights()
        self.wsum = _fsum(self.w.ravel(order="F"))
        self.sem = sem
        self.gt = gt_normals
        self.weights = weights
        self.band_fawn = band_fawn
        self.band_eikonal = band_eikonal
        self.eps = eps
        self.mode = normal_mode
        self.interior = interior_mask(self.spec.dims)

    def masks(self, f: np.ndarray) -> LossMasks:
        g = central_difference(f, self.h)
        valid = self.interior & (vector_norm(g) >= self.eps)
        af = np.abs(f)
        band = self.interior & (af < self.band_fawn)
        empty = np.zeros(self.spec.dims, dtype=bool)
        if self.sem is not None:
            floor = band & valid & (self.sem.labels == LABEL_FLOOR)
            walls = band & valid & (self.sem.labels == LABEL_WALLS)
        else:
            floor = walls = empty
        sup = band & valid & self.gt.valid if self.gt is not None else empty
        eik = self.interior & (af < self.band_eikonal)
        return LossMasks(floor, walls, sup, eik)

    def evaluate(self, f: np.ndarray, masks: Optional[LossMasks] = None,
                 need_grad: bool = False, active: Optional[LossWeights] = None):
        """Breakdown (and gradient w.r.t. ``f`` when requested).

        ``active`` overrides the weights used for ``total`` and the gradient.
        """
        lw = active if active is not None else self.weights
        if masks is None:
            masks = self.masks(f)
        h = self.h
        g = central_difference(f, h)
        out = LossBreakdown()
        dN = np.zeros(f.shape + (3,)) if need_grad else None
        dG = np.zeros(f.shape + (3,)) if need_grad else None

        def normals_at(m):
            gm = g[m]
            if self.mode == "raw":
                return gm, None
            r = vector_norm(gm)
            return gm / np.maximum(r, self.eps)[:, None], r

        # floor
        n, _ = normals_at(masks.floor)
        lf = np.sqrt(n[:, 0] * n[:, 0] + n[:, 1] * n[:, 1])
        out.floor = _mean(lf)
        if need_grad and lf.size and lw.lambda_fawn:
            c = lw.lambda_fawn / lf.size
            safe = np.where(lf > 0, lf, 1.0)
            dn = np.zeros_like(n)
            dn[:, 0] = np.where(lf > 0, n[:, 0] / safe, 0.0) * c
            dn[:, 1] = np.where(lf > 0, n[:, 1] / safe, 0.0) * c
            dN[masks.floor] += dn

        # walls
        n, _ = normals_at(masks.walls)
        lwall = np.abs(n[:, 2])
        out.walls = _mean(lwall)
        if need_grad and lwall.size and lw.lambda_fawn:
            c = lw.lambda_fawn / lwall.size
            dn = np.zeros_like(n)
            dn[:, 2] = np.sign(n[:, 2]) * c
            dN[masks.walls] += dn
        out.fawn = out.walls + out.floor

        # supervised normals
        if self.gt is not None:
            n, _ = normals_at(masks.supervised)
            m = self.gt.normals[masks.supervised]
            dot = n[:, 0] * m[:, 0] + n[:, 1] * m[:, 1] + n[:, 2] * m[:, 2]
            d = n - m
            dl = vector_norm(d)
            out.norm_cosine = _mean(1.0 - dot)
            out.norm_euclid = _mean(dl)
            if need_grad and dot.size and lw.lambda_norm:
                c = lw.lambda_norm / dot.size
                safe = np.where(dl > 0, dl, 1.0)
                dn = -m * c + np.where((dl > 0)[:, None], d / safe[:, None], 0.0) * c
                dN[masks.supervised] += dn

        # eikonal acts on the raw gradient
        ge = g[masks.eikonal]
        r = vector_norm(ge)
        de = r - 1.0
        out.eikonal = _mean(de * de)
        if need_grad and r.size and lw.lambda_norm:
            c = lw.lambda_norm / r.size
            coef = np.where(r > 0, 2.0 * de / np.where(r > 0, r, 1.0), 0.0) * c
            dG[masks.eikonal] += ge * coef[:, None]

        # data
        out.data = _data_term(f, self.obs, self.w)

        out.total = compose_total(out, lw)
        out.counts = {
            "floor": int(masks.floor.sum()),
            "walls": int(masks.walls.sum()),
            "supervised": int(masks.supervised.sum()),
            "eikonal": int(masks.eikonal.sum()),
            "data": int(np.count_nonzero(self.w)),
        }
        if not need_grad:
            return out

        # back through the normalisation v -> v/|v|: (I - n n^T) / |v|
        touched = np.any(dN != 0.0, axis=-1)
        if np.any(touched):
            gt_ = g[touched]
            if self.mode == "raw":
                dG[touched] += dN[touched]
            else:
                r = vector_norm(gt_)
                nn = gt_ / r[:, None]
                dn = dN[touched]
                proj = dn[:, 0] * nn[:, 0] + dn[:, 1] * nn[:, 1] + dn[:, 2] * nn[:, 2]
                dG[touched] += (dn - nn * proj[:, None]) / r[:, None]
        grad = central_difference_adjoint(dG, h)
        if lw.lambda_data and self.wsum > 0:
            grad += (2.0 * lw.lambda_data / self.wsum) * self.w * (f - self.obs)
        return out, grad


def _problem(obs, sem, gt_normals, weights, band_fawn, band_eikonal, eps, normal_mode):
    return _Problem(obs, sem, gt_normals, weights, band_fawn, band_eikonal, eps, normal_mode)


def default_bands(spec) -> Tuple[float, float]:
    return 1.0 * spec.voxel_size, 3.0 * spec.voxel_size


def total_loss(vol: TsdfVolume, obs: TsdfVolume, sem: Optional[SemanticVolume],
               gt_normals: Optional[NormalField], weights: LossWeights,
               band_fawn: Optional[float] = None, band_eikonal: Optional[float] = None,
               eps: float = DEFAULT_EPS, normal_mode: str = "normalized",
               masks: Optional[LossMasks] = None) -> LossBreakdown:
    """Full breakdown of the objective at ``vol``.

    Band widths default to ``1 h`` (normal terms) and ``3 h`` (eikonal).  Pass
    ``masks`` (see :func:`loss_masks`) to evaluate with frozen voxel sets.
    """
    check_same_grid(vol.spec, obs.spec)
    bf, be = default_bands(vol.spec)
    p = _problem(obs, sem, gt_normals, weights, band_fawn or bf, band_eikonal or be, eps, normal_mode)
    return p.evaluate(np.asarray(vol.values, np.float64), masks)


def grad_total(vol: TsdfVolume, obs: TsdfVolume, sem: Optional[SemanticVolume],
               gt_normals: Optional[NormalField], weights: LossWeights,
               band_fawn: Optional[float] = None, band_eikonal: Optional[float] = None,
               eps: float = DEFAULT_EPS, normal_mode: str = "normalized") -> np.ndarray:
    """d total / d f_i for every voxel, shape ``(nx, ny, nz)``."""
    check_same_grid(vol.spec, obs.spec)
    bf, be = default_bands(vol.spec)
    p = _problem(obs, sem, gt_normals, weights, band_fawn or bf, band_eikonal or be, eps, normal_mode)
    return p.evaluate(np.asarray(vol.values, np.float64), need_grad=True)[1]


def loss_masks(vol: TsdfVolume, obs: TsdfVolume, sem, gt_normals, weights: LossWeights,
               band_fawn=None, band_eikonal=None, eps=DEFAULT_EPS,
               normal_mode="normalized") -> LossMasks:
    bf, be = default_bands(vol.spec)
    p = _problem(obs, sem, gt_normals, weights, band_fawn or bf, band_eikonal or be, eps, normal_mode)
    return p.masks(np.asarray(vol.values, np.float64))
