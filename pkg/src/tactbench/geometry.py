"""Triangle meshes, rigid poses, BVH ray casting and mass properties.

All lengths are meters. Meshes are immutable once built; the BVH is built
eagerly so a mesh can be shared read-only between renderers.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

DEGENERATE_AREA = 1e-12
LEAF_SIZE = 8
T_MIN = 1e-9
_BARY_TOL = 1e-12


class GeometryError(Exception):
    pass


class ParseError(GeometryError):
    pass


class EmptyMeshError(GeometryError):
    pass


class NonFiniteError(GeometryError):
    pass


class BadDimsError(GeometryError):
    pass


class NotWatertightError(GeometryError):
    pass


# ---------------------------------------------------------------------------
# Poses
# ---------------------------------------------------------------------------

def _quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def _quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _matrix_to_quat(m):
    m = np.asarray(m, dtype=float)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return q / np.linalg.norm(q)


@dataclass(frozen=True)
class Pose:
    """Rigid transform: rotation as a unit quaternion (w, x, y, z) then translation."""

    rotation: tuple = (1.0, 0.0, 0.0, 0.0)
    translation: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=float)
        n = float(np.linalg.norm(q))
        if not np.all(np.isfinite(q)) or n == 0.0:
            raise ValueError("rotation quaternion must be finite and non-zero")
        if abs(n - 1.0) > 1e-6:
            q = q / n
        object.__setattr__(self, "rotation", tuple(float(v) for v in q))
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))

    @classmethod
    def from_matrix(cls, rotation_matrix, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(tuple(_matrix_to_quat(rotation_matrix)), tuple(translation))

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        h = 0.5 * yaw
        return cls((math.cos(h), 0.0, 0.0, math.sin(h)), tuple(translation))

    @property
    def matrix(self) -> np.ndarray:
        return _quat_to_matrix(self.rotation)

    @property
    def t(self) -> np.ndarray:
        return np.array(self.translation)

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return p @ self.matrix.T + self.t

    def rotate(self, vectors) -> np.ndarray:
        return np.asarray(vectors, dtype=float) @ self.matrix.T

    def compose(self, other: "Pose") -> "Pose":
        """``self.compose(other).apply(x) == self.apply(other.apply(x))``."""
        q = _quat_mul(np.array(self.rotation), np.array(other.rotation))
        t = self.apply(other.t)
        return Pose(tuple(q), tuple(t))

    def inverse(self) -> "Pose":
        w, x, y, z = self.rotation
        qi = (w, -x, -y, -z)
        t = -(_quat_to_matrix(qi) @ self.t)
        return Pose(qi, tuple(t))

    def as_array(self) -> np.ndarray:
        return np.array(self.rotation + self.translation)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera pose with +z looking from ``eye`` to ``target`` and +y pointing image-down."""
    eye = np.asarray(eye, dtype=float)
    fwd = np.asarray(target, dtype=float) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=float))
    if np.linalg.norm(right) < 1e-12:
        right = np.cross(fwd, [0.0, 1.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return Pose.from_matrix(np.column_stack([right, down, fwd]), eye)


@dataclass(frozen=True)
class Ray:
    origin: tuple
    direction: tuple

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        n = float(np.linalg.norm(d))
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("ray direction must be finite and non-zero")
        object.__setattr__(self, "direction", tuple(float(v) for v in d / n))
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))


@dataclass(frozen=True)
class Hit:
    t: float
    point: np.ndarray
    normal: np.ndarray
    triangle_id: int


@dataclass(frozen=True)
class MassProperties:
    mass: float
    center_of_mass: np.ndarray
    volume: float


# ---------------------------------------------------------------------------
# BVH
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BVH:
    """Flat binary BVH. Leaves reference ``order[start:start + count]``."""

    lo: np.ndarray
    hi: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    order: np.ndarray


def build_bvh(tri_vertices: np.ndarray, leaf_size: int = LEAF_SIZE) -> BVH:
    tmin = tri_vertices.min(axis=1)
    tmax = tri_vertices.max(axis=1)
    cent = tri_vertices.mean(axis=1)
    span = float(np.max(tmax.max(axis=0) - tmin.min(axis=0))) if len(tri_vertices) else 1.0
    pad = 1e-9 * max(span, 1e-3)

    lo, hi, left, right, start, count = [], [], [], [], [], []
    order = np.arange(len(tri_vertices))

    def node(a, b):
        idx = len(lo)
        ids = order[a:b]
        lo.append(tmin[ids].min(axis=0) - pad)
        hi.append(tmax[ids].max(axis=0) + pad)
        left.append(-1)
        right.append(-1)
        start.append(a)
        count.append(b - a)
        if b - a <= leaf_size:
            return idx
        c = cent[ids]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        srt = np.argsort(c[:, axis], kind="stable")
        order[a:b] = ids[srt]
        mid = a + (b - a) // 2
        count[idx] = 0
        left[idx] = node(a, mid)
        right[idx] = node(mid, b)
        return idx

    node(0, len(tri_vertices))
    return BVH(np.array(lo), np.array(hi), np.array(left), np.array(right),
               np.array(start), np.array(count), order)


# ---------------------------------------------------------------------------
# Meshes
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray
    bvh: BVH = field(repr=False)
    dropped_degenerate: int = 0

    @classmethod
    def from_arrays(cls, vertices, triangles) -> "TriMesh":
        v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise NonFiniteError("vertex coordinates must be finite")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ParseError("triangle index out of range")
        tri = v[f]
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        area2 = np.linalg.norm(cross, axis=1)
        keep = 0.5 * area2 >= DEGENERATE_AREA
        dropped = int(np.count_nonzero(~keep))
        f = f[keep]
        if len(f) == 0:
            raise EmptyMeshError("mesh has no valid triangles")
        normals = cross[keep] / area2[keep, None]
        v.setflags(write=False)
        f.setflags(write=False)
        normals.setflags(write=False)
        return cls(v, f, normals, build_bvh(v[f]), dropped)

    def __len__(self):
        return len(self.triangles)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        used = self.vertices[np.unique(self.triangles)]
        return used.min(axis=0), used.max(axis=0)

    @property
    def extent(self) -> np.ndarray:
        lo, hi = self.bounds
        return hi - lo

    def scaled(self, s: float) -> "TriMesh":
        if not s > 0:
            raise BadDimsError("scale must be positive")
        return TriMesh.from_arrays(self.vertices * s, self.triangles)

    def transformed(self, pose: Pose) -> "TriMesh":
        return TriMesh.from_arrays(pose.apply(self.vertices), self.triangles)


def parse_mesh_text(text: str) -> tuple[np.ndarray, np.ndarray]:
    verts, faces = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        tag = parts[0]
        try:
            if tag == "v" and len(parts) == 4:
                verts.append([float(p) for p in parts[1:]])
            elif tag == "f" and len(parts) == 4:
                # tolerate "i/j/k" style references by taking the vertex index
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:]])
            else:
                raise ValueError(tag)
        except ValueError:
            raise ParseError(f"line {lineno}: cannot parse {raw.strip()!r}") from None
    v = np.array(verts, dtype=float).reshape(-1, 3)
    f = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if f.size and (f.min() < 0 or f.max() >= len(v)):
        raise ParseError("face references a missing vertex")
    return v, f


def load_mesh(path: str | os.PathLike, scale: float = 1.0) -> TriMesh:
    """Load the ASCII ``v``/``f`` mesh format and scale it uniformly."""
    if not scale > 0:
        raise BadDimsError("scale must be positive")
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except UnicodeDecodeError as exc:
        raise ParseError(str(exc)) from None
    v, f = parse_mesh_text(text)
    if len(f) == 0:
        raise EmptyMeshError(f"{path}: no faces")
    if not np.all(np.isfinite(v)):
        raise NonFiniteError(f"{path}: non-finite vertex")
    return TriMesh.from_arrays(v * scale, f)


def save_mesh(mesh: TriMesh, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, z in mesh.vertices.tolist():
            fh.write(f"v {x!r} {y!r} {z!r}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def _prism(polygon: np.ndarray, cap: list, height: float):
    """Extrude a CCW polygon (triangulated by ``cap``) along z, centered."""
    n = len(polygon)
    h = 0.5 * height
    verts = np.vstack([
        np.column_stack([polygon, np.full(n, -h)]),
        np.column_stack([polygon, np.full(n, h)]),
    ])
    tris = []
    for a, b, c in cap:
        tris.append((a, c, b))
        tris.append((a + n, b + n, c + n))
    for i in range(n):
        j = (i + 1) % n
        tris.append((i, j, j + n))
        tris.append((i, j + n, i + n))
    return verts, tris


def _uv_solid(radius: float, half_length: float, tess: int):
    """Sphere (half_length = 0) or capsule along z, poles as single vertices."""
    rings = max(tess // 2, 2)
    if half_length > 0 and rings % 2:
        rings += 1
    verts = [(0.0, 0.0, -radius - half_length)]
    ring_z = []
    for i in range(1, rings):
        phi = math.pi * i / rings - 0.5 * math.pi
        z = radius * math.sin(phi)
        rr = radius * math.cos(phi)
        if half_length > 0:
            offsets = [-half_length] if i < rings // 2 else ([-half_length, half_length] if i == rings // 2 else [half_length])
        else:
            offsets = [0.0]
        for off in offsets:
            ring_z.append(len(verts))
            for k in range(tess):
                th = 2 * math.pi * k / tess
                verts.append((rr * math.cos(th), rr * math.sin(th), z + off))
    top = len(verts)
    verts.append((0.0, 0.0, radius + half_length))
    tris = []
    first = ring_z[0]
    for k in range(tess):
        tris.append((0, first + (k + 1) % tess, first + k))
    for a, b in zip(ring_z[:-1], ring_z[1:]):
        for k in range(tess):
            k1 = (k + 1) % tess
            tris.append((a + k, a + k1, b + k1))
            tris.append((a + k, b + k1, b + k))
    last = ring_z[-1]
    for k in range(tess):
        tris.append((top, last + k, last + (k + 1) % tess))
    return np.array(verts), tris


def make_primitive(kind: str, dims, tessellation: int = 32) -> TriMesh:
    """Watertight primitive centered at the origin (AABB center).

    kinds and dims:
      box (x, y, z); cylinder (radius, height); sphere (radius,);
      capsule (radius, cylinder_length); l_block (x, y, z, arm_thickness)
    """
    dims = [float(d) for d in np.atleast_1d(dims)]
    if not dims or any(not (d > 0) or not math.isfinite(d) for d in dims):
        raise BadDimsError(f"{kind}: dimensions must be positive, got {dims}")
    curved = kind in ("cylinder", "sphere", "capsule")
    if curved and tessellation < 8:
        raise BadDimsError("tessellation must be >= 8 for curved primitives")
    need = {"box": 3, "cylinder": 2, "sphere": 1, "capsule": 2, "l_block": 4}
    if kind not in need:
        raise BadDimsError(f"unknown primitive kind {kind!r}")
    if len(dims) != need[kind]:
        raise BadDimsError(f"{kind} takes {need[kind]} dimensions, got {len(dims)}")

    if kind == "box":
        x, y, z = (0.5 * d for d in dims)
        poly = np.array([[-x, -y], [x, -y], [x, y], [-x, y]])
        v, t = _prism(poly, [(0, 1, 2), (0, 2, 3)], dims[2])
    elif kind == "cylinder":
        r, h = dims
        ang = 2 * np.pi * np.arange(tessellation) / tessellation
        ring = np.column_stack([r * np.cos(ang), r * np.sin(ang)])
        poly = np.vstack([ring, [[0.0, 0.0]]])
        c = tessellation
        v, t = _prism(poly[:c], [], h)
        # caps as fans around a center vertex
        v = np.vstack([v, [[0, 0, -0.5 * h], [0, 0, 0.5 * h]]])
        cb, ct = 2 * c, 2 * c + 1
        for i in range(c):
            j = (i + 1) % c
            t.append((cb, j, i))
            t.append((ct, i + c, j + c))
    elif kind == "sphere":
        v, t = _uv_solid(dims[0], 0.0, tessellation)
    elif kind == "capsule":
        v, t = _uv_solid(dims[0], 0.5 * dims[1], tessellation)
    else:
        lx, ly, lz, th = dims
        if th >= lx or th >= ly:
            raise BadDimsError("l_block arm thickness must be below both lengths")
        poly = np.array([[0, 0], [lx, 0], [lx, th], [th, th], [th, ly], [0, ly]], dtype=float)
        poly -= [0.5 * lx, 0.5 * ly]
        v, t = _prism(poly, [(0, 1, 2), (0, 2, 3), (0, 3, 4), (0, 4, 5)], lz)
    return TriMesh.from_arrays(v, t)


def icosphere(radius: float, subdivisions: int = 2) -> TriMesh:
    p = (1 + 5 ** 0.5) / 2
    v = [(-1, p, 0), (1, p, 0), (-1, -p, 0), (1, -p, 0), (0, -1, p), (0, 1, p),
         (0, -1, -p), (0, 1, -p), (p, 0, -1), (p, 0, 1), (-p, 0, -1), (-p, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(x, dtype=float) / np.linalg.norm(x) for x in v]
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nf
    return TriMesh.from_arrays(np.array(verts) * radius, f)


# ---------------------------------------------------------------------------
# Topology
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WatertightReport:
    closed: bool
    consistent_winding: bool
    boundary_edges: int
    nonmanifold_edges: int

    @property
    def watertight(self) -> bool:
        return self.closed and self.consistent_winding


def watertight_report(mesh: TriMesh) -> WatertightReport:
    f = mesh.triangles
    directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    undirected = np.sort(directed, axis=1)
    _, ucount = np.unique(undirected, axis=0, return_counts=True)
    boundary = int(np.count_nonzero(ucount == 1))
    nonmanifold = int(np.count_nonzero(ucount > 2))
    closed = boundary == 0 and nonmanifold == 0
    # half-edge pairing: each directed edge appears once and its twin exists
    _, dcount = np.unique(directed, axis=0, return_counts=True)
    # with every undirected edge used twice, unique directed edges imply opposite twins
    consistent = bool(np.all(dcount == 1))
    return WatertightReport(closed, consistent, boundary, nonmanifold)


def is_watertight(mesh: TriMesh) -> bool:
    return watertight_report(mesh).watertight


def mass_properties(mesh: TriMesh, density: float) -> MassProperties:
    if not density > 0:
        raise BadDimsError("density must be positive")
    if not is_watertight(mesh):
        raise NotWatertightError("mass properties need a watertight mesh")
    tri = mesh.vertices[mesh.triangles]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    vol6 = np.einsum("ij,ij->i", a, np.cross(b, c))
    volume = vol6.sum() / 6.0
    com = (vol6[:, None] * (a + b + c)).sum(axis=0) / (24.0 * volume)
    # inward-wound solids come out negative; orientation is not part of the contract
    volume = abs(volume)
    return MassProperties(density * volume, com, volume)


# ---------------------------------------------------------------------------
# Ray casting
# ---------------------------------------------------------------------------

def _intersect_pairs(orig, dirs, v0, e1, e2):
    """Möller-Trumbore for paired rays/triangles. Returns t (inf on miss).

    Written component-wise so every call evaluates bit-identical arithmetic
    regardless of how pairs were gathered.
    """
    dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    e1x, e1y, e1z = e1[:, 0], e1[:, 1], e1[:, 2]
    e2x, e2y, e2z = e2[:, 0], e2[:, 1], e2[:, 2]
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    ok = np.abs(det) > 1e-30
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    sx = orig[:, 0] - v0[:, 0]
    sy = orig[:, 1] - v0[:, 1]
    sz = orig[:, 2] - v0[:, 2]
    u = (sx * px + sy * py + sz * pz) * inv
    qx = sy * e1z - sz * e1y
    qy = sz * e1x - sx * e1z
    qz = sx * e1y - sy * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    hit = ok & (u >= -_BARY_TOL) & (v >= -_BARY_TOL) & (u + v <= 1 + _BARY_TOL) & (t > T_MIN)
    return np.where(hit, t, np.inf)


def _reduce_nearest(ray_ids, t, tri_ids, best_t, best_id):
    """Fold candidate hits into best_t/best_id: min t, ties -> lowest triangle id."""
    m = np.isfinite(t)
    if not np.any(m):
        return
    r, t, k = ray_ids[m], t[m], tri_ids[m]
    o = np.lexsort((k, t, r))
    r, t, k = r[o], t[o], k[o]
    first = np.ones(len(r), dtype=bool)
    first[1:] = r[1:] != r[:-1]
    r, t, k = r[first], t[first], k[first]
    cur_t, cur_k = best_t[r], best_id[r]
    better = (t < cur_t) | ((t == cur_t) & (k < cur_k))
    best_t[r[better]] = t[better]
    best_id[r[better]] = k[better]


def _as_rays(origins, directions):
    o = np.ascontiguousarray(np.asarray(origins, dtype=np.float64).reshape(-1, 3))
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    if d.shape[0] == 1 and o.shape[0] > 1:
        d = np.broadcast_to(d, o.shape)
    d = np.ascontiguousarray(d)
    return o, d


def raycast_many(mesh: TriMesh, origins, directions) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hits for a batch of rays through the BVH.

    Returns (t, triangle_id); misses have t = inf and id = -1. The traversal
    is breadth-first over (ray, node) pairs so it stays vectorized.
    """
    o, d = _as_rays(origins, directions)
    n = len(o)
    best_t = np.full(n, np.inf)
    best_id = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return best_t, best_id
    bvh = mesh.bvh
    tri = mesh.vertices[mesh.triangles]
    v0 = tri[:, 0]
    e1 = tri[:, 1] - v0
    e2 = tri[:, 2] - v0
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
    rays = np.arange(n)
    nodes = np.zeros(n, dtype=np.int64)
    while rays.size:
        with np.errstate(invalid="ignore"):
            t1 = (bvh.lo[nodes] - o[rays]) * inv[rays]
            t2 = (bvh.hi[nodes] - o[rays]) * inv[rays]
        tlo = np.fmax.reduce(np.fmin(t1, t2), axis=1)
        thi = np.fmin.reduce(np.fmax(t1, t2), axis=1)
        keep = (thi >= np.maximum(tlo, 0.0)) & (tlo <= best_t[rays] * (1 + 1e-12) + 1e-15)
        rays, nodes = rays[keep], nodes[keep]
        if not rays.size:
            break
        cnt = bvh.count[nodes]
        leaf = cnt > 0
        if np.any(leaf):
            lr, ln, lc = rays[leaf], nodes[leaf], cnt[leaf]
            pr = np.repeat(lr, lc)
            starts = np.repeat(bvh.start[ln], lc)
            offs = np.arange(pr.size) - np.repeat(np.cumsum(lc) - lc, lc)
            pk = bvh.order[starts + offs]
            t = _intersect_pairs(o[pr], d[pr], v0[pk], e1[pk], e2[pk])
            _reduce_nearest(pr, t, pk, best_t, best_id)
        inner = ~leaf
        ri, ni = rays[inner], nodes[inner]
        rays = np.concatenate([ri, ri])
        nodes = np.concatenate([bvh.left[ni], bvh.right[ni]])
    return best_t, best_id


def raycast_brute_many(mesh: TriMesh, origins, directions, chunk: int = 1 << 20):
    """All-triangle reference intersection; same contract as raycast_many."""
    o, d = _as_rays(origins, directions)
    n, m = len(o), len(mesh.triangles)
    best_t = np.full(n, np.inf)
    best_id = np.full(n, -1, dtype=np.int64)
    tri = mesh.vertices[mesh.triangles]
    v0 = tri[:, 0]
    e1 = tri[:, 1] - v0
    e2 = tri[:, 2] - v0
    step = max(1, chunk // m)
    for a in range(0, n, step):
        r = np.repeat(np.arange(a, min(n, a + step)), m)
        k = np.tile(np.arange(m), min(n, a + step) - a)
        t = _intersect_pairs(o[r], d[r], v0[k], e1[k], e2[k])
        _reduce_nearest(r, t, k, best_t, best_id)
    return best_t, best_id


def _make_hit(mesh, ray, t, k):
    if k < 0:
        return None
    direction = np.array(ray.direction)
    n = mesh.normals[k].copy()
    if n @ direction > 0:
        n = -n
    return Hit(float(t), np.array(ray.origin) + t * direction, n, int(k))


def raycast(mesh: TriMesh, ray: Ray) -> Hit | None:
    t, k = raycast_many(mesh, [ray.origin], [ray.direction])
    return _make_hit(mesh, ray, t[0], k[0])


def raycast_brute(mesh: TriMesh, ray: Ray) -> Hit | None:
    t, k = raycast_brute_many(mesh, [ray.origin], [ray.direction])
    return _make_hit(mesh, ray, t[0], k[0])


def facing_normals(mesh: TriMesh, tri_ids: np.ndarray, directions) -> np.ndarray:
    """Face normals for hit triangles, flipped to oppose the ray direction."""
    d = np.broadcast_to(np.asarray(directions, dtype=float), (len(tri_ids), 3))
    n = mesh.normals[np.maximum(tri_ids, 0)]
    flip = np.einsum("ij,ij->i", n, d) > 0
    n = np.where(flip[:, None], -n, n)
    n[tri_ids < 0] = 0.0
    return n
