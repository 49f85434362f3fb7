"""Synthetic rooms with analytic ground truth.

The room interior is the region ``0 <= x <= Lx, 0 <= y <= Ly, 0 <= z <= Lz``
bounded by a (possibly wavy) floor, a flat ceiling and four walls that may
lean away from vertical.  Everything outside the room and inside clutter
boxes is solid; the TSDF is positive in free space.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .evalkit import PinholeCamera, look_at, save_cameras
from .normals import NormalField, gradient_central, normalize_field, save_vectors
from .surface import TriangleMesh, marching_cubes, save_ply
from .volume import (
    LABEL_FLOOR,
    LABEL_OTHER,
    LABEL_UNKNOWN,
    LABEL_WALLS,
    GridSpec,
    SemanticVolume,
    TsdfVolume,
    check_same_grid,
    interior_mask,
    save_labels,
    save_scalar_field,
    save_volume,
)

# primitive ids in the owner volume
FLOOR, CEILING, WALL_X0, WALL_X1, WALL_Y0, WALL_Y1 = range(6)
WALLS = (WALL_X0, WALL_X1, WALL_Y0, WALL_Y1)
FIRST_BOX = 6


@dataclass(frozen=True)
class Box:
    center: Tuple[float, ...]  # (x, y) rests on the floor, or (x, y, z)
    size: Tuple[float, float, float]
    yaw_deg: float = 0.0


@dataclass(frozen=True)
class Hole:
    center: Tuple[float, float, float]
    radius: float


@dataclass(frozen=True)
class Trajectory:
    """Outward-looking orbit around the room centre.

    Frame ``i`` sits at azimuth ``2 pi i / count``; pitches cycle through
    level, ``+pitch_deg`` (up) and ``-pitch_deg`` (down).
    """
    count: int = 24
    radius: float = 0.3
    cam_height: float = 1.3
    pitch_deg: float = 55.0
    fov_deg: float = 90.0
    image_width: int = 160
    image_height: int = 160


@dataclass(frozen=True)
class SceneSpec:
    extents: Tuple[float, float, float] = (3.6, 3.0, 2.4)
    wall_tilt_deg: Tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    floor_waviness: Tuple[float, float] = (0.0, 1.0)  # amplitude, wavelength (m)
    clutter: Tuple[Box, ...] = ()
    noise_sigma: float = 0.0
    hole_spec: Tuple[Hole, ...] = ()
    trajectory: Trajectory = field(default_factory=Trajectory)
    seed: int = 0
    voxel_size: float = 0.06
    truncation_voxels: float = 3.0
    margin_voxels: int = 3

    def __post_init__(self):
        if len(self.extents) != 3 or min(self.extents) <= 0:
            raise ValueError("room extents must be three positive lengths")
        if len(self.wall_tilt_deg) != 4:
            raise ValueError("wall_tilt_deg needs one angle per wall")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.trajectory.count < 1:
            raise ValueError("trajectory needs at least one camera")
        if self.voxel_size <= 0 or self.truncation_voxels < 1 or self.margin_voxels < 1:
            raise ValueError("invalid grid parameters")

    def grid(self) -> GridSpec:
        h = self.voxel_size
        m = self.margin_voxels
        dims = tuple(int(round(L / h)) + 2 * m for L in self.extents)
        origin = (-(m - 0.5) * h,) * 3
        return GridSpec(dims, origin, h, self.truncation_voxels * h)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene fields: {sorted(unknown)}")
        if "clutter" in d:
            d["clutter"] = tuple(Box(tuple(b["center"]), tuple(b["size"]), b.get("yaw_deg", 0.0))
                                 for b in d["clutter"])
        if "hole_spec" in d:
            d["hole_spec"] = tuple(Hole(tuple(x["center"]), x["radius"]) for x in d["hole_spec"])
        if "trajectory" in d:
            d["trajectory"] = Trajectory(**d["trajectory"])
        for k in ("extents", "wall_tilt_deg", "floor_waviness"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class SceneBundle:
    spec: SceneSpec
    gt_tsdf: TsdfVolume
    gt_mesh: TriangleMesh
    gt_normals: NormalField
    semantics: SemanticVolume
    obs_tsdf: TsdfVolume
    cameras: List[PinholeCamera]
    owner: np.ndarray  # nearest primitive id per voxel


# --------------------------------------------------------------------------
# geometry

def _wall_planes(spec: SceneSpec):
    """(unit inward normal, point on plane) for the four walls."""
    Lx, Ly, _ = spec.extents
    out = []
    for wid, tilt in zip(WALLS, spec.wall_tilt_deg):
        t = math.radians(tilt)
        c, s = math.cos(t), math.sin(t)
        if wid == WALL_X0:
            n, p = (c, 0.0, s), (0.0, 0.0, 0.0)
        elif wid == WALL_X1:
            n, p = (-c, 0.0, s), (Lx, 0.0, 0.0)
        elif wid == WALL_Y0:
            n, p = (0.0, c, s), (0.0, 0.0, 0.0)
        else:
            n, p = (0.0, -c, s), (0.0, Ly, 0.0)
        out.append((np.array(n), np.array(p)))
    return out


def _floor_distance(P: np.ndarray, spec: SceneSpec, phase: Tuple[float, float]) -> np.ndarray:
    amp, wl = spec.floor_waviness
    x, y, z = P[..., 0], P[..., 1], P[..., 2]
    if amp == 0.0:
        return z.copy()
    k = 2.0 * math.pi / wl
    sx, cx_ = np.sin(k * x + phase[0]), np.cos(k * x + phase[0])
    sy, cy_ = np.sin(k * y + phase[1]), np.cos(k * y + phase[1])
    height = amp * sx * sy
    gx, gy = amp * k * cx_ * sy, amp * k * sx * cy_
    # first-order distance to the height field
    return (z - height) / np.sqrt(1.0 + gx * gx + gy * gy)


def _box_distance(P: np.ndarray, box: Box) -> np.ndarray:
    c = np.asarray(box.center, dtype=np.float64)
    half = 0.5 * np.asarray(box.size, dtype=np.float64)
    if len(c) == 2:
        c = np.array([c[0], c[1], half[2]])
    t = math.radians(box.yaw_deg)
    R = np.array([[math.cos(t), -math.sin(t), 0.0], [math.sin(t), math.cos(t), 0.0], [0, 0, 1.0]])
    q = np.abs((P - c) @ R) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside


def primitive_distances(spec: SceneSpec, P: np.ndarray) -> np.ndarray:
    """Signed distance to each primitive, positive on the free-space side."""
    rng = np.random.default_rng(spec.seed)
    phase = tuple(rng.uniform(0.0, 2.0 * math.pi, 2))
    d = [_floor_distance(P, spec, phase), spec.extents[2] - P[..., 2]]
    for n, p in _wall_planes(spec):
        d.append((P - p) @ n)
    for box in spec.clutter:
        d.append(_box_distance(P, box))
    return np.stack(d, axis=0)


def signed_distance(spec: SceneSpec, P: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    D = primitive_distances(spec, P)
    owner = np.argmin(D, axis=0)
    return np.min(D, axis=0), owner


# --------------------------------------------------------------------------
# observation model and labels

def perturb_tsdf(gt: TsdfVolume, noise_sigma: float, hole_spec: Sequence[Hole] = (),
                 seed: int = 0) -> TsdfVolume:
    """Gaussian noise on non-truncated voxels, plus unobserved spherical holes.

    Hole voxels get value ``+tau`` and weight 0.  Without holes the result
    carries no weights (all observed).
    """
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    tau = gt.spec.truncation
    f = np.array(gt.values, dtype=np.float64)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        noise = rng.normal(0.0, noise_sigma, size=gt.spec.n_voxels).reshape(gt.spec.dims, order="F")
        band = np.abs(f) < tau
        f = np.where(band, np.clip(f + noise, -tau, tau), f)
    weights = None
    if hole_spec:
        P = gt.spec.centers()
        weights = np.ones(gt.spec.dims)
        for hole in hole_spec:
            inside = np.linalg.norm(P - np.asarray(hole.center), axis=-1) < hole.radius
            f[inside] = tau
            weights[inside] = 0.0
    return TsdfVolume(gt.spec, f, weights)


def label_semantics_heuristic(gt_normals: NormalField, gt_tsdf: TsdfVolume,
                              floor_height_band: float, angle_tol_deg: float, *,
                              floor_z: float = 0.0, shell_mask: Optional[np.ndarray] = None,
                              band: Optional[float] = None) -> SemanticVolume:
    """Rule-based floor / walls / other labels from GT geometry.

    Band voxels (interior, ``|f| < band``, valid normal; ``band`` defaults to
    the truncation distance) become floor when the normal is within the
    tolerance of +z and the voxel lies within ``floor_height_band`` of
    ``floor_z``; walls when ``|n_z| < sin(tol)`` on the room shell; other
    otherwise.  Off-band voxels are unknown.
    """
    check_same_grid(gt_normals.spec, gt_tsdf.spec)
    spec = gt_tsdf.spec
    band = spec.truncation if band is None else band
    tol = math.radians(angle_tol_deg)
    n = gt_normals.normals
    in_band = interior_mask(spec.dims) & (np.abs(gt_tsdf.values) < band) & gt_normals.valid
    z = spec.origin[2] + spec.voxel_size * np.arange(spec.dims[2])
    near_floor = np.abs(z - floor_z)[None, None, :] < floor_height_band
    floor = in_band & (n[..., 2] >= math.cos(tol)) & near_floor
    shell = np.ones(spec.dims, dtype=bool) if shell_mask is None else shell_mask
    walls = in_band & ~floor & (np.abs(n[..., 2]) < math.sin(tol)) & shell
    labels = np.full(spec.dims, LABEL_UNKNOWN, dtype=np.uint8)
    labels[in_band] = LABEL_OTHER
    labels[walls] = LABEL_WALLS
    labels[floor] = LABEL_FLOOR
    return SemanticVolume(spec, labels)


def orbit_cameras(spec: SceneSpec) -> List[PinholeCamera]:
    tr = spec.trajectory
    Lx, Ly, _ = spec.extents
    center = np.array([Lx / 2, Ly / 2])
    W, H = tr.image_width, tr.image_height
    f = (W / 2.0) / math.tan(math.radians(tr.fov_deg) / 2.0)
    cams = []
    for i in range(tr.count):
        theta = 2.0 * math.pi * i / tr.count
        pitch = math.radians(tr.pitch_deg) * (0.0, 1.0, -1.0)[i % 3]
        d = np.array([math.cos(theta), math.sin(theta)])
        eye = np.array([*(center + tr.radius * d), tr.cam_height])
        look = np.array([d[0] * math.cos(pitch), d[1] * math.cos(pitch), math.sin(pitch)])
        pose = look_at(eye, eye + look)
        cams.append(PinholeCamera(f, f, (W - 1) / 2.0, (H - 1) / 2.0, W, H, pose))
    return cams


def generate_room(spec: SceneSpec, angle_tol_deg: float = 15.0,
                  floor_height_band: Optional[float] = None) -> SceneBundle:
    grid = spec.grid()
    tau = grid.truncation
    P = grid.centers()
    sdf, owner = signed_distance(spec, P)
    if not np.any(sdf > 0):
        raise ValueError("degenerate scene: no free space inside the room")
    gt = TsdfVolume(grid, np.clip(sdf, -tau, tau))
    normals = normalize_field(gradient_central(gt))
    if floor_height_band is None:
        floor_height_band = tau + abs(spec.floor_waviness[0]) + grid.voxel_size
    shell = owner < FIRST_BOX
    sem = label_semantics_heuristic(normals, gt, floor_height_band, angle_tol_deg,
                                    floor_z=0.0, shell_mask=shell)
    obs = perturb_tsdf(gt, spec.noise_sigma, spec.hole_spec, seed=spec.seed + 1)
    return SceneBundle(spec, gt, marching_cubes(gt), normals, sem, obs,
                       orbit_cameras(spec), owner.astype(np.int16))


def random_room_spec(seed: int, max_tilt_deg: float = 2.0, **overrides) -> SceneSpec:
    """Room with small random wall tilts, floor waviness and a few boxes."""
    rng = np.random.default_rng(seed)
    ext = overrides.pop("extents", None)
    if ext is None:
        ext = (float(rng.uniform(3.0, 4.0)), float(rng.uniform(2.6, 3.4)), 2.4)
    tilts = tuple(float(t) for t in rng.uniform(-max_tilt_deg, max_tilt_deg, 4))
    wav = (float(rng.uniform(0.0, 0.01)), float(rng.uniform(1.0, 2.0)))
    boxes = []
    for _ in range(int(rng.integers(1, 3))):
        size = (float(rng.uniform(0.4, 0.8)), float(rng.uniform(0.4, 0.8)), float(rng.uniform(0.5, 0.9)))
        cx = float(rng.uniform(0.2 + size[0], ext[0] - 0.2 - size[0]))
        cy = float(rng.uniform(0.2 + size[1], ext[1] - 0.2 - size[1]))
        boxes.append(Box((cx, cy), size, float(rng.uniform(0, 90))))
    kw = dict(extents=tuple(ext), wall_tilt_deg=tilts, floor_waviness=wav, clutter=tuple(boxes),
              seed=seed)
    kw.update(overrides)
    return SceneSpec(**kw)


def normal_deviation_medians(vol: TsdfVolume, sem: SemanticVolume, band: Optional[float] = None,
                             eps: float = 1e-8) -> Tuple[float, float]:
    """Median angle (degrees) of floor normals from vertical and of wall
    normals from horizontal, over labeled voxels of the narrow band."""
    band = vol.spec.voxel_size if band is None else band
    n = normalize_field(gradient_central(vol), eps)
    m = interior_mask(vol.spec.dims) & (np.abs(vol.values) < band) & n.valid
    nz = n.normals[..., 2]
    fl = m & (sem.labels == LABEL_FLOOR)
    wa = m & (sem.labels == LABEL_WALLS)
    floor_dev = np.degrees(np.arccos(np.clip(nz[fl], -1.0, 1.0)))
    wall_dev = np.degrees(np.arcsin(np.clip(np.abs(nz[wa]), 0.0, 1.0)))
    med = lambda a: float(np.median(a)) if a.size else float("nan")
    return med(floor_dev), med(wall_dev)


def write_bundle(bundle: SceneBundle, out_dir, with_normals: bool = False) -> List[str]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_volume(bundle.gt_tsdf, out / "gt.fvol")
    save_ply(bundle.gt_mesh, out / "gt.ply")
    save_labels(bundle.semantics, out / "sem.fsem")
    save_volume(bundle.obs_tsdf, out / "obs.fvol")
    save_scalar_field(bundle.obs_tsdf.spec, bundle.obs_tsdf.effective_weights(),
                      out / "obs_weights.fvol")
    save_cameras(bundle.cameras, out / "cams.json")
    (out / "grid.json").write_text(json.dumps(bundle.gt_tsdf.spec.to_dict(), indent=1) + "\n")
    files = ["gt.fvol", "gt.ply", "sem.fsem", "obs.fvol", "obs_weights.fvol", "cams.json", "grid.json"]
    if with_normals:
        save_vectors(bundle.gt_normals, out / "gt_normals.fvec")
        files.append("gt_normals.fvec")
    return files
