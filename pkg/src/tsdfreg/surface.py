"""Zero-isosurface extraction, surface sampling and PLY I/O.

Marching cubes here does not ship a hand-typed triangle table.  For each
cube the polygon loops are traced face by face: on every face the iso-line
segments follow from the corner signs, and faces with the alternating sign
pattern are resolved with the asymptotic decider (sign of the bilinear
saddle value).  The decision is made once per grid face, so the two cubes
sharing a face always agree and the mesh has no cracks.  Loops are fanned
into triangles.  Tables are built lazily per (sign case, face decisions)
key and cached.

Corner ``c`` of a cube is at offset ``(c & 1, (c >> 1) & 1, (c >> 2) & 1)``.
Edge ``e = 4 a + bu + 2 bw`` runs along axis ``a`` with offsets ``bu`` on
axis ``(a + 1) % 3`` and ``bw`` on axis ``(a + 2) % 3``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .volume import GridSpec, TsdfVolume

ZERO_NUDGE = 1e-12  # times truncation


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray   # (V, 3) float64, meters
    triangles: np.ndarray  # (F, 3) int64

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        if not np.all(np.isfinite(v)):
            raise ValueError("mesh vertices must be finite")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray


def empty_mesh() -> TriangleMesh:
    return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))


# --------------------------------------------------------------------------
# case tables

def _corner(c: int) -> Tuple[int, int, int]:
    return c & 1, (c >> 1) & 1, (c >> 2) & 1


def _corner_id(x: int, y: int, z: int) -> int:
    return x | (y << 1) | (z << 2)


def _edge_between(c0: int, c1: int) -> int:
    p0, p1 = _corner(c0), _corner(c1)
    axis = next(a for a in range(3) if p0[a] != p1[a])
    lo = p0 if p0[axis] < p1[axis] else p1
    return 4 * axis + lo[(axis + 1) % 3] + 2 * lo[(axis + 2) % 3]


def _face_corners(a: int, s: int) -> List[int]:
    """Corners of face (axis a, side s), counter-clockwise seen from outside."""
    u, w = (a + 1) % 3, (a + 2) % 3
    ring = [(0, 0), (1, 0), (1, 1), (0, 1)]
    if s == 0:
        ring = ring[::-1]
    out = []
    for bu, bw in ring:
        p = [0, 0, 0]
        p[a], p[u], p[w] = s, bu, bw
        out.append(_corner_id(*p))
    return out


_FACES = [_face_corners(a, s) for a in range(3) for s in (0, 1)]  # face id 2a + s


@lru_cache(maxsize=None)
def case_triangles(config: int, face_bits: int) -> Tuple[Tuple[int, int, int], ...]:
    """Triangles (as local edge triples) for one cube.

    ``config`` bit c is set when corner c is below the iso-value.  Bit f of
    ``face_bits`` is set when ambiguous face f has its below-iso corners
    connected through the face centre.
    """
    neg = [(config >> c) & 1 == 1 for c in range(8)]
    nxt: Dict[int, int] = {}
    for f, ring in enumerate(_FACES):
        edges = [_edge_between(ring[k], ring[(k + 1) % 4]) for k in range(4)]
        # walking the ring: entry = above->below, exit = below->above
        kinds = []
        for k in range(4):
            a, b = neg[ring[k]], neg[ring[(k + 1) % 4]]
            if a != b:
                kinds.append((k, "entry" if b else "exit"))
        if not kinds:
            continue
        connected = len(kinds) == 4 and (face_bits >> f) & 1 == 1
        for i, (k, kind) in enumerate(kinds):
            if kind != "exit":
                continue
            if connected:
                # exit joins the next entry around the ring
                j = next(kinds[(i + d) % len(kinds)][0] for d in range(1, len(kinds))
                         if kinds[(i + d) % len(kinds)][1] == "entry")
            else:
                # exit joins the entry that opened the same below-iso arc
                j = next(kinds[(i - d) % len(kinds)][0] for d in range(1, len(kinds))
                         if kinds[(i - d) % len(kinds)][1] == "entry")
            nxt[edges[k]] = edges[j]
    tris = []
    seen = set()
    for start in sorted(nxt):
        if start in seen:
            continue
        loop = [start]
        seen.add(start)
        e = nxt[start]
        while e != start:
            loop.append(e)
            seen.add(e)
            e = nxt[e]
        for a, b, c in _triangulate_loop(loop):
            # reversed so that triangle normals point toward increasing f
            tris.append((a, c, b))
    return tuple(tris)


def _edge_midpoint(e: int) -> np.ndarray:
    a, off = _edge_offsets(e)
    p = np.array(off, dtype=float)
    p[a] = 0.5
    return p


def _edge_faces(e: int) -> set:
    a, off = _edge_offsets(e)
    return {2 * b + off[b] for b in range(3) if b != a}


def _triangulate_loop(loop: List[int]) -> List[Tuple[int, int, int]]:
    """Minimum-length triangulation of a polygon loop of edge ids.

    Diagonals between two vertices on a common cube face are avoided: the
    neighbouring cube may use the same diagonal, which would give an edge
    shared by four triangles.
    """
    n = len(loop)
    if n == 3:
        return [tuple(loop)]
    mid = [_edge_midpoint(e) for e in loop]
    faces = [_edge_faces(e) for e in loop]

    def cost(i, j):
        if (j - i) % n in (1, n - 1):
            return 0.0
        c = float(np.sum((mid[i] - mid[j]) ** 2))
        return c + (1e6 if faces[i] & faces[j] else 0.0)

    best = {}
    split = {}
    for span in range(2, n):
        for i in range(n - span):
            j = i + span
            choice = None
            for k in range(i + 1, j):
                c = best.get((i, k), 0.0) + best.get((k, j), 0.0) + cost(i, k) + cost(k, j)
                if choice is None or c < choice[0]:
                    choice = (c, k)
            best[(i, j)], split[(i, j)] = choice
    out = []
    stack = [(0, n - 1)]
    while stack:
        i, j = stack.pop()
        if j - i < 2:
            continue
        k = split[(i, j)]
        out.append((loop[i], loop[k], loop[j]))
        stack.append((i, k))
        stack.append((k, j))
    return out


def _edge_offsets(e: int) -> Tuple[int, Tuple[int, int, int]]:
    a = e // 4
    bu, bw = e & 1, (e >> 1) & 1
    off = [0, 0, 0]
    off[(a + 1) % 3] = bu
    off[(a + 2) % 3] = bw
    return a, tuple(off)


def _face_decisions(g: np.ndarray, neg: np.ndarray, a: int) -> np.ndarray:
    """Per grid face normal to axis ``a``: ambiguous with connected negatives."""
    u, w = (a + 1) % 3, (a + 2) % 3
    G = np.transpose(g, (a, u, w))
    N = np.transpose(neg, (a, u, w))
    g00, g10, g11, g01 = G[:, :-1, :-1], G[:, 1:, :-1], G[:, 1:, 1:], G[:, :-1, 1:]
    n00, n10, n11, n01 = N[:, :-1, :-1], N[:, 1:, :-1], N[:, 1:, 1:], N[:, :-1, 1:]
    amb = (n00 == n11) & (n10 == n01) & (n00 != n10)
    denom = g00 + g11 - g10 - g01
    with np.errstate(divide="ignore", invalid="ignore"):
        saddle = (g00 * g11 - g10 * g01) / denom
    dec = amb & (saddle < 0)
    inv = np.argsort((a, u, w))
    return np.transpose(dec, inv)


def marching_cubes(vol, iso: float = 0.0, spec: Optional[GridSpec] = None,
                   mask: Optional[np.ndarray] = None) -> TriangleMesh:
    """Triangle mesh of the ``iso`` level set of a TSDF volume.

    ``vol`` may also be a raw ``(nx, ny, nz)`` array, in which case ``spec``
    gives the placement.  Vertices are welded per grid edge; triangle normals
    point toward increasing values.  With a boolean ``mask`` (e.g. observed
    voxels of a fused volume) only cells whose eight corners are all in the
    mask are polygonized.
    """
    if isinstance(vol, TsdfVolume):
        spec = vol.spec
        values = vol.values
    else:
        values = vol
        if spec is None:
            raise ValueError("spec is required for raw arrays")
    g = np.asarray(values, dtype=np.float64) - iso
    g = np.where(g == 0.0, ZERO_NUDGE * spec.truncation, g)
    neg = g < 0
    nx, ny, nz = g.shape
    if not neg.any() or neg.all():
        return empty_mesh()

    # one vertex per sign-changing grid edge
    verts = []
    vid = []
    count = 0
    origin = np.asarray(spec.origin)
    h = spec.voxel_size
    for a in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[a] = slice(0, -1)
        hi[a] = slice(1, None)
        g0, g1 = g[tuple(lo)], g[tuple(hi)]
        cross = neg[tuple(lo)] != neg[tuple(hi)]
        flat = np.flatnonzero(cross.ravel(order="F"))
        ids = np.full(cross.shape, -1, dtype=np.int64)
        idx = np.unravel_index(flat, cross.shape, order="F")
        ids[idx] = count + np.arange(len(flat))
        count += len(flat)
        a0, a1 = g0[idx], g1[idx]
        t = a0 / (a0 - a1)
        p = np.stack([origin[b] + h * idx[b].astype(np.float64) for b in range(3)], axis=1)
        p[:, a] += h * t
        verts.append(p)
        vid.append(ids)
    vertices = np.concatenate(verts, axis=0)

    cfg = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int64)
    for c in range(8):
        dx, dy, dz = _corner(c)
        cfg |= neg[dx:nx - 1 + dx, dy:ny - 1 + dy, dz:nz - 1 + dz].astype(np.int64) << c
    fbits = np.zeros_like(cfg)
    for a in range(3):
        dec = _face_decisions(g, neg, a)
        for s in (0, 1):
            sl = [slice(0, nx - 1), slice(0, ny - 1), slice(0, nz - 1)]
            sl[a] = slice(s, s + (nx, ny, nz)[a] - 1)
            fbits |= dec[tuple(sl)].astype(np.int64) << (2 * a + s)

    key = cfg | (fbits << 8)
    active = (cfg != 0) & (cfg != 255)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != g.shape:
            raise ValueError("mask shape does not match the volume")
        for c in range(8):
            dx, dy, dz = _corner(c)
            active &= mask[dx:nx - 1 + dx, dy:ny - 1 + dy, dz:nz - 1 + dz]
    cubes = np.flatnonzero(active.ravel(order="F"))
    keys = key.ravel(order="F")[cubes]
    ci, cj, ck = np.unravel_index(cubes, cfg.shape, order="F")

    tri_cube = []
    tri_local = []
    tri_verts = []
    for k in np.unique(keys):
        tris = case_triangles(int(k & 255), int(k >> 8))
        if not tris:
            continue
        sel = np.flatnonzero(keys == k)
        T = np.asarray(tris, dtype=np.int64)
        gid = {}
        for e in np.unique(T):
            a, off = _edge_offsets(int(e))
            gid[int(e)] = vid[a][ci[sel] + off[0], cj[sel] + off[1], ck[sel] + off[2]]
        block = np.stack([np.stack([gid[int(e)] for e in row], axis=1) for row in T], axis=1)
        tri_verts.append(block.reshape(-1, 3))
        tri_cube.append(np.repeat(cubes[sel], len(T)))
        tri_local.append(np.tile(np.arange(len(T)), len(sel)))
    if not tri_verts:
        return empty_mesh()
    tv = np.concatenate(tri_verts)
    order = np.lexsort((np.concatenate(tri_local), np.concatenate(tri_cube)))
    tv = tv[order]
    if np.any(tv < 0):
        raise AssertionError("triangle references an edge without a crossing")

    a, b, c = vertices[tv[:, 0]], vertices[tv[:, 1]], vertices[tv[:, 2]]
    nondegenerate = np.any(np.cross(b - a, c - a) != 0.0, axis=1)
    tv = tv[nondegenerate]
    if mask is not None:
        # drop vertices on edges of skipped cells
        used, inv = np.unique(tv, return_inverse=True)
        vertices, tv = vertices[used], inv.reshape(tv.shape)
    return TriangleMesh(vertices, tv)


# --------------------------------------------------------------------------
# sampling

def sample_points(mesh: TriangleMesh, n: int, seed: int = 0) -> PointCloud:
    """Area-weighted uniform samples on the mesh surface."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    areas = mesh.triangle_areas()
    cdf = np.cumsum(areas)
    pick = np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right")
    pick = np.minimum(pick, len(areas) - 1)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    tri = mesh.triangles[pick]
    a, b, c = (mesh.vertices[tri[:, i]] for i in range(3))
    pts = (1.0 - r1)[:, None] * a + (r1 * (1.0 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    return PointCloud(pts)


# --------------------------------------------------------------------------
# PLY

def save_ply(mesh: TriangleMesh, path, binary: bool = True) -> None:
    v = np.asarray(mesh.vertices, dtype="<f4")
    t = np.asarray(mesh.triangles, dtype="<i4")
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"element vertex {len(v)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        f"element face {len(t)}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    ).encode("ascii")
    if binary:
        faces = np.zeros(len(t), dtype=[("n", "u1"), ("i", "<i4", (3,))])
        faces["n"] = 3
        faces["i"] = t
        body = v.tobytes() + faces.tobytes()
    else:
        lines = ["%r %r %r" % (float(x), float(y), float(z)) for x, y, z in v]
        lines += ["3 %d %d %d" % tuple(row) for row in t]
        body = ("\n".join(lines) + ("\n" if lines else "")).encode("ascii")
    Path(path).write_bytes(header + body)


def load_ply(path) -> TriangleMesh:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        fmt = None
        n_vert = n_face = 0
        vprops: List[Tuple[str, str]] = []
        face_list = None
        current = None
        while True:
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: truncated PLY header")
            parts = line.decode("ascii").split()
            if not parts or parts[0] == "comment":
                continue
            if parts[0] == "format":
                fmt = parts[1]
            elif parts[0] == "element":
                current = parts[1]
                if current == "vertex":
                    n_vert = int(parts[2])
                elif current == "face":
                    n_face = int(parts[2])
            elif parts[0] == "property":
                if current == "vertex":
                    vprops.append((parts[1], parts[2]))
                elif current == "face" and parts[1] == "list":
                    face_list = (parts[2], parts[3])
            elif parts[0] == "end_header":
                break
        names = [p[1] for p in vprops]
        if names[:3] != ["x", "y", "z"]:
            raise ValueError(f"{path}: vertex properties must start with x, y, z")
        if fmt == "ascii":
            rest = fh.read().decode("ascii").split("\n")
            rows = [r.split() for r in rest if r.strip()]
            verts = np.array([[float(x) for x in r[:3]] for r in rows[:n_vert]]).reshape(-1, 3)
            faces = []
            for r in rows[n_vert:n_vert + n_face]:
                if int(r[0]) != 3:
                    raise ValueError(f"{path}: only triangle faces are supported")
                faces.append([int(x) for x in r[1:4]])
            tris = np.array(faces, dtype=np.int64).reshape(-1, 3)
        elif fmt == "binary_little_endian":
            types = {"float": "<f4", "float32": "<f4", "double": "<f8", "uchar": "u1",
                     "uint8": "u1", "int": "<i4", "int32": "<i4", "uint": "<u4",
                     "uint32": "<u4", "short": "<i2", "ushort": "<u2", "char": "i1"}
            vdt = np.dtype([(n, types[t]) for t, n in vprops])
            raw = np.frombuffer(fh.read(vdt.itemsize * n_vert), dtype=vdt, count=n_vert)
            verts = np.stack([raw["x"], raw["y"], raw["z"]], axis=1).astype(np.float64)
            cnt_t, idx_t = face_list or ("uchar", "int")
            fdt = np.dtype([("n", types[cnt_t]), ("i", types[idx_t], (3,))])
            rawf = np.frombuffer(fh.read(fdt.itemsize * n_face), dtype=fdt, count=n_face)
            if np.any(rawf["n"] != 3):
                raise ValueError(f"{path}: only triangle faces are supported")
            tris = rawf["i"].astype(np.int64)
        else:
            raise ValueError(f"{path}: unsupported PLY format {fmt!r}")
    return TriangleMesh(verts, tris)
