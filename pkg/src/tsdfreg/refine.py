"""Two-stage first-order minimisation of the objective over TSDF values.

Stage 1 fits the observation only (plane-prior and normal weights forced to
zero); stage 2 switches on the full objective.  Normals and voxel sets are
recomputed from the current volume at every iteration.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .losses import LossBreakdown, LossWeights, _Problem
from .normals import DEFAULT_EPS, NormalField
from .volume import SemanticVolume, TsdfVolume, check_same_grid

log = logging.getLogger(__name__)

OPTIMIZERS = ("plain-gradient", "adaptive-moments")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class RefineDiverged(RuntimeError):
    """Raised when the objective or its gradient stops being finite."""

    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class RefineConfig:
    """Refinement schedule.

    ``step_size``, ``band_fawn`` and ``band_eikonal`` are in meters; ``None``
    resolves against the grid to ``0.01 h``, ``1 h`` and ``3 h``.
    """

    stage1_iters: int = 200
    stage2_iters: int = 800
    step_size: Optional[float] = None
    optimizer: str = "adaptive-moments"
    weights: LossWeights = field(default_factory=LossWeights)
    band_fawn: Optional[float] = None
    band_eikonal: Optional[float] = None
    eps_normalize: float = DEFAULT_EPS
    clamp_to_truncation: bool = True
    seed: int = 0
    normal_mode: str = "normalized"

    def __post_init__(self):
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        if self.stage1_iters < 0 or self.stage2_iters < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step_size must be > 0")
        for name in ("band_fawn", "band_eikonal"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be > 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if not self.eps_normalize > 0:
            raise ValueError("eps_normalize must be > 0")

    def resolved(self, h: float) -> "RefineConfig":
        return RefineConfig(
            stage1_iters=self.stage1_iters,
            stage2_iters=self.stage2_iters,
            step_size=self.step_size if self.step_size is not None else 1e-2 * h,
            optimizer=self.optimizer,
            weights=self.weights,
            band_fawn=self.band_fawn if self.band_fawn is not None else 1.0 * h,
            band_eikonal=self.band_eikonal if self.band_eikonal is not None else 3.0 * h,
            eps_normalize=self.eps_normalize,
            clamp_to_truncation=self.clamp_to_truncation,
            seed=self.seed,
            normal_mode=self.normal_mode,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RefineConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        d = dict(d)
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "RefineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ablation presets; every term toggled through the weights only
PRESETS = {
    "data-only": LossWeights(lambda_fawn=0.0, lambda_norm=0.0, lambda_data=1.0),
    "+norm": LossWeights(lambda_fawn=0.0, lambda_norm=1e-4, lambda_data=1.0),
    "+fawn": LossWeights(lambda_fawn=1e-3, lambda_norm=0.0, lambda_data=1.0),
    "+fawn+norm": LossWeights(lambda_fawn=1e-3, lambda_norm=1e-4, lambda_data=1.0),
}


def preset(name: str, **overrides) -> RefineConfig:
    return RefineConfig(weights=PRESETS[name], **overrides)


@dataclass
class RefineReport:
    trajectory: List[LossBreakdown] = field(default_factory=list)
    stage_seconds: List[float] = field(default_factory=lambda: [0.0, 0.0])
    final: Optional[LossBreakdown] = None

    def to_dict(self) -> dict:
        return {
            "trajectory": [b.to_dict() for b in self.trajectory],
            "stage_seconds": list(self.stage_seconds),
            "final": self.final.to_dict() if self.final is not None else None,
        }


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def step(values: np.ndarray, grad: np.ndarray, state: Optional[AdamState], step_size: float,
         optimizer: str = "plain-gradient") -> Tuple[np.ndarray, Optional[AdamState]]:
    """One update.

    plain-gradient:   f <- f - step * g
    adaptive-moments: m <- 0.9 m + 0.1 g;  v <- 0.999 v + 0.001 g^2;
                      f <- f - step * (m / (1 - 0.9^t)) / (sqrt(v / (1 - 0.999^t)) + 1e-8)
    with t counted from 1 at the first update.
    """
    values = np.asarray(values, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if values.shape != grad.shape:
        raise ValueError("gradient shape does not match values")
    if optimizer == "plain-gradient":
        new = values - step_size * grad
    elif optimizer == "adaptive-moments":
        if state is None:
            state = AdamState(np.zeros_like(values), np.zeros_like(values), 0)
        t = state.t + 1
        m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * grad
        v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * (grad * grad)
        m_hat = m / (1.0 - ADAM_BETA1 ** t)
        v_hat = v / (1.0 - ADAM_BETA2 ** t)
        new = values - step_size * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        state = AdamState(m, v, t)
    else:
        raise ValueError(f"unknown optimizer {optimizer!r}")
    if not np.all(np.isfinite(new)):
        raise FloatingPointError("non-finite update")
    return new, state


def refine(init: TsdfVolume, obs: TsdfVolume, sem: Optional[SemanticVolume],
           gt_normals: Optional[NormalField], cfg: RefineConfig,
           callback=None) -> Tuple[TsdfVolume, RefineReport]:
    check_same_grid(*[x.spec for x in (init, obs, sem, gt_normals) if x is not None])
    spec = init.spec
    rc = cfg.resolved(spec.voxel_size)
    tau = spec.truncation
    problem = _Problem(obs, sem, gt_normals, rc.weights, rc.band_fawn, rc.band_eikonal,
                       rc.eps_normalize, rc.normal_mode)
    stage1 = LossWeights(0.0, 0.0, rc.weights.lambda_data)

    f = np.array(init.values, dtype=np.float64)
    report = RefineReport()
    state = None
    schedule = [(stage1, rc.stage1_iters), (rc.weights, rc.stage2_iters)]
    it = 0
    for stage, (weights, n_iter) in enumerate(schedule):
        t0 = time.perf_counter()
        state = None  # moments restart with each stage's objective
        for _ in range(n_iter):
            with np.errstate(over="ignore", invalid="ignore"):
                # non-finite results are caught explicitly below
                bd, g = problem.evaluate(f, need_grad=True, active=weights)
            if not (math.isfinite(bd.total) and np.all(np.isfinite(g))):
                report.stage_seconds[stage] = time.perf_counter() - t0
                raise RefineDiverged(f"non-finite objective at iteration {it}", report)
            report.trajectory.append(bd)
            try:
                f, state = step(f, g, state, rc.step_size, rc.optimizer)
            except FloatingPointError as e:
                raise RefineDiverged(f"{e} at iteration {it}", report) from e
            if rc.clamp_to_truncation:
                np.clip(f, -tau, tau, out=f)
            if callback is not None:
                callback(it, bd)
            it += 1
        report.stage_seconds[stage] = time.perf_counter() - t0
        log.debug("stage %d done: %d iterations in %.2fs", stage + 1, n_iter,
                  report.stage_seconds[stage])

    with np.errstate(over="ignore", invalid="ignore"):
        report.final = problem.evaluate(f)
    if not math.isfinite(report.final.total):
        raise RefineDiverged("non-finite final objective", report)
    if not rc.clamp_to_truncation:
        # outputs must still be valid TSDF volumes
        f = np.clip(f, -tau, tau)
    return TsdfVolume(spec, f, init.weights), report
