"""Reconstruction evaluation: depth rendering, masking, re-fusion, metrics.

Pipeline of :func:`evaluate_protocol`:

1. render ground-truth depth maps from the GT mesh for every camera,
2. render predicted depth maps from the predicted mesh,
3. invalidate predicted pixels where the GT depth is invalid,
4. fuse the masked predicted depths into a TSDF and mesh it,
5. compare point samples of the fused mesh and the GT mesh.

Coverage is computed on the raw predicted mesh, before any masking.

Pixel ``(u, v)`` has its center at image coordinates ``(u, v)``; a camera
point ``(x, y, z)`` projects to ``(fx x / z + cx, fy y / z + cy)``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numba
import numpy as np
from scipy.spatial import cKDTree

from .surface import PointCloud, TriangleMesh, marching_cubes, sample_points
from .volume import GridSpec, TsdfVolume

Z_NEAR = 1e-4
DEFAULT_THRESHOLD = 0.05
_DEPTH_HEADER = struct.Struct("<4sII")


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int = 640
    height: int = 480
    pose: np.ndarray = None  # 4x4 camera-to-world

    def __post_init__(self):
        pose = np.eye(4) if self.pose is None else np.asarray(self.pose, dtype=np.float64)
        pose = pose.reshape(4, 4).copy()
        pose.flags.writeable = False
        object.__setattr__(self, "pose", pose)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        R = pose[:3, :3]
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-6:
            raise ValueError("pose rotation is not orthonormal")

    def world_to_camera(self, p: np.ndarray) -> np.ndarray:
        R, t = self.pose[:3, :3], self.pose[:3, 3]
        return (np.asarray(p) - t) @ R

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "pose": [float(x) for x in self.pose.ravel()]}

    @classmethod
    def from_dict(cls, d: dict) -> "PinholeCamera":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), np.asarray(d["pose"], dtype=np.float64))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose looking from ``eye`` at ``target`` (+z forward, +y down)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = right, down, fwd, eye
    return pose


def save_cameras(cams: Sequence[PinholeCamera], path) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cams], indent=1) + "\n")


def load_cameras(path) -> List[PinholeCamera]:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, list):
        raise ValueError("camera file must hold a JSON array")
    return [PinholeCamera.from_dict(d) for d in data]


@dataclass(frozen=True)
class DepthMap:
    width: int
    height: int
    depth: np.ndarray  # (height, width), meters, 0 = invalid

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0


def save_depth(dm: DepthMap, path) -> None:
    buf = _DEPTH_HEADER.pack(b"FDEP", dm.width, dm.height)
    Path(path).write_bytes(buf + np.asarray(dm.depth, dtype="<f4").tobytes(order="C"))


def load_depth(path) -> DepthMap:
    buf = Path(path).read_bytes()
    if len(buf) < _DEPTH_HEADER.size:
        raise ValueError("depth file too short")
    magic, w, h = _DEPTH_HEADER.unpack_from(buf)
    if magic != b"FDEP":
        raise ValueError(f"bad depth magic {magic!r}")
    if len(buf) - _DEPTH_HEADER.size != 4 * w * h:
        raise ValueError("depth payload size mismatch")
    d = np.frombuffer(buf, dtype="<f4", offset=_DEPTH_HEADER.size).reshape(h, w)
    return DepthMap(w, h, d.astype(np.float32))


# --------------------------------------------------------------------------
# rasterisation

@numba.njit(cache=True)
def _edge_fn(ua, va, ub, vb, x, y):
    # evaluated in a canonical vertex order so that the two triangles sharing
    # an edge get exactly opposite values and leave no gap between them
    if ua > ub or (ua == ub and va > vb):
        return -((ua - ub) * (y - vb) - (va - vb) * (x - ub))
    return (ub - ua) * (y - va) - (vb - va) * (x - ua)


@numba.njit(cache=True)
def _raster_triangle(p, fx, fy, cx, cy, W, H, depth):
    u0 = fx * p[0, 0] / p[0, 2] + cx
    v0 = fy * p[0, 1] / p[0, 2] + cy
    u1 = fx * p[1, 0] / p[1, 2] + cx
    v1 = fy * p[1, 1] / p[1, 2] + cy
    u2 = fx * p[2, 0] / p[2, 2] + cx
    v2 = fy * p[2, 1] / p[2, 2] + cy
    area = (u1 - u0) * (v2 - v0) - (u2 - u0) * (v1 - v0)
    if area == 0.0 or not np.isfinite(area):
        return
    sgn = 1.0 if area > 0.0 else -1.0
    iz0, iz1, iz2 = 1.0 / p[0, 2], 1.0 / p[1, 2], 1.0 / p[2, 2]
    xa = max(0, int(math.ceil(min(u0, u1, u2))))
    xb = min(W - 1, int(math.floor(max(u0, u1, u2))))
    ya = max(0, int(math.ceil(min(v0, v1, v2))))
    yb = min(H - 1, int(math.floor(max(v0, v1, v2))))
    for y in range(ya, yb + 1):
        for x in range(xa, xb + 1):
            w0 = _edge_fn(u1, v1, u2, v2, x, y) * sgn
            w1 = _edge_fn(u2, v2, u0, v0, x, y) * sgn
            w2 = _edge_fn(u0, v0, u1, v1, x, y) * sgn
            if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                continue
            tot = w0 + w1 + w2
            if tot <= 0.0:
                continue
            z = tot / (w0 * iz0 + w1 * iz1 + w2 * iz2)
            if z > 0.0 and (depth[y, x] == 0.0 or z < depth[y, x]):
                depth[y, x] = z


@numba.njit(cache=True)
def _raster_mesh(vc, tris, fx, fy, cx, cy, W, H, znear, depth):
    poly = np.empty((4, 3))
    sub = np.empty((3, 3))
    for t in range(tris.shape[0]):
        n = 0
        for k in range(3):
            a = vc[tris[t, k]]
            b = vc[tris[t, (k + 1) % 3]]
            ina = a[2] >= znear
            inb = b[2] >= znear
            if ina:
                poly[n] = a
                n += 1
            if ina != inb:
                # always from the kept vertex, so shared edges clip identically
                p_in = a if ina else b
                p_out = b if ina else a
                s = (znear - p_in[2]) / (p_out[2] - p_in[2])
                poly[n] = p_in + s * (p_out - p_in)
                poly[n, 2] = znear
                n += 1
        for k in range(1, n - 1):
            sub[0] = poly[0]
            sub[1] = poly[k]
            sub[2] = poly[k + 1]
            _raster_triangle(sub, fx, fy, cx, cy, W, H, depth)


def render_depth(mesh: TriangleMesh, cam: PinholeCamera,
                 max_depth: Optional[float] = None) -> DepthMap:
    """Z-buffer depth of the nearest surface per pixel; 0 where nothing is hit.

    Interpolation is perspective-correct, both triangle faces are drawn and
    geometry in front of ``Z_NEAR`` is clipped.
    """
    W, H = int(cam.width), int(cam.height)
    depth = np.zeros((H, W), dtype=np.float64)
    if not mesh.is_empty:
        vc = np.ascontiguousarray(cam.world_to_camera(mesh.vertices))
        tris = np.ascontiguousarray(mesh.triangles)
        _raster_mesh(vc, tris, float(cam.fx), float(cam.fy), float(cam.cx), float(cam.cy),
                     W, H, Z_NEAR, depth)
    if max_depth is not None:
        depth[depth > max_depth] = 0.0
    return DepthMap(W, H, depth)


def mask_depth(pred: DepthMap, gt: DepthMap) -> DepthMap:
    """Invalidate predicted pixels where the ground truth is invalid."""
    if (pred.width, pred.height) != (gt.width, gt.height):
        raise ValueError("depth maps differ in resolution")
    return DepthMap(pred.width, pred.height, np.where(gt.depth > 0, pred.depth, 0.0))


def fuse_depths(depths: Sequence[DepthMap], cams: Sequence[PinholeCamera],
                spec: GridSpec) -> TsdfVolume:
    """Weighted-average projective TSDF fusion with unit per-frame weights."""
    if len(depths) != len(cams):
        raise ValueError("need one camera per depth map")
    if not depths:
        raise ValueError("need at least one frame")
    tau = spec.truncation
    P = spec.centers().reshape(-1, 3)
    acc = np.zeros(len(P))
    cnt = np.zeros(len(P))
    for dm, cam in zip(depths, cams):
        if (dm.width, dm.height) != (cam.width, cam.height):
            raise ValueError("depth map resolution does not match camera")
        pc = cam.world_to_camera(P)
        z = pc[:, 2]
        front = z > 0
        zs = np.where(front, z, 1.0)
        u = np.floor(cam.fx * pc[:, 0] / zs + cam.cx + 0.5)
        v = np.floor(cam.fy * pc[:, 1] / zs + cam.cy + 0.5)
        inside = front & (u >= 0) & (u < dm.width) & (v >= 0) & (v < dm.height)
        idx = np.flatnonzero(inside)
        d = np.asarray(dm.depth, dtype=np.float64)[v[idx].astype(np.int64), u[idx].astype(np.int64)]
        sdf = d - z[idx]
        ok = (d > 0) & (sdf > -tau)
        idx, sdf = idx[ok], sdf[ok]
        acc[idx] += np.clip(sdf, -tau, tau)
        cnt[idx] += 1.0
    values = np.where(cnt > 0, acc / np.maximum(cnt, 1.0), tau)
    shape = spec.dims
    return TsdfVolume(spec, values.reshape(shape), cnt.reshape(shape))


def frame_coverage(dm: DepthMap) -> float:
    return 100.0 * np.count_nonzero(dm.depth > 0) / (dm.width * dm.height)


def coverage(mesh: TriangleMesh, cams: Sequence[PinholeCamera],
             max_depth: Optional[float] = None) -> float:
    """Mean over frames of the percentage of pixels with a valid rendered depth."""
    if not cams:
        raise ValueError("coverage needs at least one camera")
    per = [frame_coverage(render_depth(mesh, c, max_depth)) for c in cams]
    return math.fsum(per) / len(per)


# --------------------------------------------------------------------------
# point metrics

def nearest_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Exact distance from every ``src`` point to its nearest ``dst`` point."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    _, j = cKDTree(dst).query(src, k=1)
    d = src - dst[j]
    return np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2])


def fscore(prec: float, recall: float) -> float:
    if prec + recall == 0:
        return 0.0
    return 2.0 * prec * recall / (prec + recall)


def point_metrics(pred, gt, threshold: float = DEFAULT_THRESHOLD) -> Tuple[float, float, float, float, float]:
    """(acc, comp, prec %, recall %, fscore %); distances in meters."""
    P = pred.points if isinstance(pred, PointCloud) else np.asarray(pred)
    G = gt.points if isinstance(gt, PointCloud) else np.asarray(gt)
    if len(P) == 0 or len(G) == 0:
        raise ValueError("point clouds must be non-empty")
    d_pred = nearest_distances(P, G)
    d_gt = nearest_distances(G, P)
    acc = math.fsum(d_pred.tolist()) / len(d_pred)
    comp = math.fsum(d_gt.tolist()) / len(d_gt)
    prec = 100.0 * np.count_nonzero(d_pred < threshold) / len(d_pred)
    rec = 100.0 * np.count_nonzero(d_gt < threshold) / len(d_gt)
    return acc, comp, prec, rec, fscore(prec, rec)


@dataclass
class MetricsReport:
    acc_cm: float
    comp_cm: float
    prec_pct: float
    recall_pct: float
    fscore_pct: float
    coverage_pct: float

    def to_dict(self) -> dict:
        # JSON has no infinity; an empty fused mesh reports null distances
        return {k: (v if math.isfinite(v) else None) for k, v in asdict(self).items()}


def evaluate_protocol(pred_mesh: TriangleMesh, gt_mesh: TriangleMesh,
                      cams: Sequence[PinholeCamera], spec: GridSpec,
                      n_sample: int = 100_000, seed: int = 0,
                      threshold: float = DEFAULT_THRESHOLD,
                      max_depth: Optional[float] = None) -> MetricsReport:
    if gt_mesh.is_empty:
        raise ValueError("ground-truth mesh is empty")
    gt_depths = [render_depth(gt_mesh, c, max_depth) for c in cams]
    pred_depths = [render_depth(pred_mesh, c, max_depth) for c in cams]
    masked = [mask_depth(p, g) for p, g in zip(pred_depths, gt_depths)]
    fused = fuse_depths(masked, cams, spec)
    fused_mesh = marching_cubes(fused, mask=fused.weights > 0)
    cover = math.fsum(frame_coverage(d) for d in pred_depths) / len(pred_depths)
    if fused_mesh.is_empty:
        return MetricsReport(math.inf, math.inf, 0.0, 0.0, 0.0, cover)
    pts_pred = sample_points(fused_mesh, n_sample, seed)
    pts_gt = sample_points(gt_mesh, n_sample, seed + 1)
    acc, comp, prec, rec, f = point_metrics(pts_pred, pts_gt, threshold)
    return MetricsReport(100.0 * acc, 100.0 * comp, prec, rec, f, cover)
