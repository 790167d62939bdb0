"""Triangle mesh substrate: OBJ I/O, normalization, BVH, exact ray queries.

Meshes and BVHs are immutable after construction, so concurrent read-only
queries are safe. BVH construction is single-threaded; batch queries fan out
across numba threads.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as _k
from .errors import DataError


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Indexed triangle soup: vertices (N,3) float64, faces (M,3) int32."""

    vertices: np.ndarray
    faces: np.ndarray
    bbox: np.ndarray = field(init=False)

    def __post_init__(self):
        verts = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        faces = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int32))
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise DataError(f"vertices must be (N, 3), got {verts.shape}")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise DataError(f"faces must be (M, 3), got {faces.shape}")
        if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
            raise DataError("face index out of range")
        if len(verts):
            bbox = np.stack([verts.min(axis=0), verts.max(axis=0)])
        else:
            bbox = np.zeros((2, 3))
        for a in (verts, faces, bbox):
            a.flags.writeable = False
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "faces", faces)
        object.__setattr__(self, "bbox", bbox)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def face_normal(self, face_index: int) -> np.ndarray:
        """Unit geometric normal of one face (right-hand winding)."""
        i0, i1, i2 = self.faces[face_index]
        v = self.vertices
        n = np.cross(v[i1] - v[i0], v[i2] - v[i0])
        norm = np.linalg.norm(n)
        if norm == 0.0:
            raise DataError(f"degenerate face {face_index}")
        return n / norm

    def face_areas(self) -> np.ndarray:
        tri = self.vertices[self.faces]
        cr = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        return 0.5 * np.linalg.norm(cr, axis=1)


@dataclass
class Ray:
    """Origin plus unit direction; the direction is normalized on creation."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        d = np.asarray(self.direction, dtype=np.float64)
        norm = np.linalg.norm(d)
        if norm == 0.0:
            raise ValueError("ray direction must be nonzero")
        self.direction = d / norm


@dataclass(frozen=True)
class HitRecord:
    t: float
    face_index: int
    geometric_normal: np.ndarray
    barycentric: tuple[float, float]


class Bvh:
    """Flat median-split BVH (longest axis, <= 4 triangles per leaf)."""

    LEAF_SIZE = 4

    def __init__(self, mesh: TriangleMesh):
        if mesh.n_faces == 0:
            raise DataError("cannot build a BVH over an empty mesh")
        self.mesh = mesh
        self.verts = mesh.vertices
        self.faces = mesh.faces

        tri = self.verts[mesh.faces]
        tmin = tri.min(axis=1)
        tmax = tri.max(axis=1)
        cent = tri.mean(axis=1)
        prim = np.arange(mesh.n_faces, dtype=np.int32)

        node_min: list[np.ndarray] = []
        node_max: list[np.ndarray] = []
        left: list[int] = []
        right: list[int] = []
        start: list[int] = []
        count: list[int] = []

        def new_node() -> int:
            node_min.append(np.zeros(3))
            node_max.append(np.zeros(3))
            left.append(-1)
            right.append(-1)
            start.append(0)
            count.append(0)
            return len(left) - 1

        stack = [(new_node(), 0, mesh.n_faces)]
        while stack:
            node, lo, hi = stack.pop()
            idx = prim[lo:hi]
            node_min[node] = tmin[idx].min(axis=0)
            node_max[node] = tmax[idx].max(axis=0)
            if hi - lo <= self.LEAF_SIZE:
                start[node] = lo
                count[node] = hi - lo
                continue
            axis = int(np.argmax(node_max[node] - node_min[node]))
            mid = (lo + hi) // 2
            order = np.argpartition(cent[idx, axis], mid - lo)
            prim[lo:hi] = idx[order]
            lc = new_node()
            rc = new_node()
            left[node] = lc
            right[node] = rc
            stack.append((rc, mid, hi))
            stack.append((lc, lo, mid))

        self.node_min = np.ascontiguousarray(node_min)
        self.node_max = np.ascontiguousarray(node_max)
        self.left = np.asarray(left, dtype=np.int32)
        self.right = np.asarray(right, dtype=np.int32)
        self.start = np.asarray(start, dtype=np.int32)
        self.count = np.asarray(count, dtype=np.int32)
        self.prim = prim
        for a in (self.node_min, self.node_max, self.left, self.right,
                  self.start, self.count, self.prim):
            a.flags.writeable = False

    @property
    def n_nodes(self) -> int:
        return len(self.left)

    def _args(self):
        return (self.verts, self.faces, self.node_min, self.node_max,
                self.left, self.right, self.start, self.count, self.prim)


def build_bvh(mesh: TriangleMesh) -> Bvh:
    return Bvh(mesh)


_bvh_cache: weakref.WeakKeyDictionary = weakref.WeakKeyDictionary()


def as_bvh(geom: TriangleMesh | Bvh) -> Bvh:
    """Return the BVH for a mesh, building and caching it on first use."""
    if isinstance(geom, Bvh):
        return geom
    bvh = _bvh_cache.get(geom)
    if bvh is None:
        bvh = Bvh(geom)
        _bvh_cache[geom] = bvh
    return bvh


def load_mesh(path) -> TriangleMesh:
    """Load an ASCII OBJ file (v/f records; polygons fan-triangulated).

    vn/vt/material records are ignored. Raises DataError with the offending
    line number on malformed records or out-of-range indices.
    """
    verts: list[tuple[float, float, float]] = []
    tris: list[tuple[int, int, int]] = []
    tri_lines: list[int] = []
    try:
        with open(path, "r", encoding="ascii", errors="replace") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "v":
            if len(parts) < 4:
                raise DataError(f"{path}:{lineno}: vertex needs 3 coordinates")
            try:
                verts.append((float(parts[1]), float(parts[2]), float(parts[3])))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: bad vertex: {exc}") from exc
        elif tag == "f":
            if len(parts) < 4:
                raise DataError(f"{path}:{lineno}: face needs >= 3 vertices")
            idx = []
            for tok in parts[1:]:
                head = tok.split("/")[0]
                try:
                    i = int(head)
                except ValueError as exc:
                    raise DataError(f"{path}:{lineno}: bad face index {tok!r}") from exc
                if i < 0:
                    i = len(verts) + i + 1
                if i < 1:
                    raise DataError(f"{path}:{lineno}: face index out of range")
                idx.append(i - 1)
            for k in range(1, len(idx) - 1):
                tris.append((idx[0], idx[k], idx[k + 1]))
                tri_lines.append(lineno)
        # vn / vt / o / g / s / usemtl / mtllib are ignored
    n = len(verts)
    for (a, b, c), lineno in zip(tris, tri_lines):
        if a >= n or b >= n or c >= n:
            raise DataError(f"{path}:{lineno}: face index out of range")
    return TriangleMesh(np.asarray(verts, dtype=np.float64).reshape(-1, 3),
                        np.asarray(tris, dtype=np.int32).reshape(-1, 3))


def save_obj(mesh: TriangleMesh, path) -> None:
    """Write an ASCII OBJ file (deterministic byte output)."""
    with open(path, "w", encoding="ascii") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {float(x)!r} {float(y)!r} {float(z)!r}\n")
        for a, b, c in mesh.faces:
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")


def normalize(mesh: TriangleMesh) -> TriangleMesh:
    """Center the mesh at the origin and scale the longest bbox edge to 2."""
    if mesh.n_vertices == 0:
        raise DataError("cannot normalize an empty mesh")
    extent = mesh.bbox[1] - mesh.bbox[0]
    longest = float(extent.max())
    if longest <= 0.0:
        raise DataError("degenerate mesh: zero-extent bounding box")
    center = 0.5 * (mesh.bbox[0] + mesh.bbox[1])
    scale = 2.0 / longest
    return TriangleMesh((mesh.vertices - center) * scale, mesh.faces)


def intersect_ray(geom: TriangleMesh | Bvh, ray: Ray,
                  t_min: float = 0.0, t_max: float = np.inf) -> HitRecord | None:
    """Nearest hit with t in [t_min, t_max], or None. BVH == linear scan."""
    if t_min < 0.0 or not t_min < t_max:
        raise ValueError("need 0 <= t_min < t_max")
    o, d = ray.origin, ray.direction
    if isinstance(geom, Bvh):
        f, t, u, v = _k.bvh_intersect(*geom._args(),
                                      o[0], o[1], o[2], d[0], d[1], d[2],
                                      t_min, t_max)
        mesh = geom.mesh
    else:
        f, t, u, v = _k.linear_intersect(geom.vertices, geom.faces,
                                         o[0], o[1], o[2], d[0], d[1], d[2],
                                         t_min, t_max)
        mesh = geom
    if f < 0:
        return None
    return HitRecord(t=float(t), face_index=int(f),
                     geometric_normal=mesh.face_normal(int(f)),
                     barycentric=(float(u), float(v)))


def intersect_rays(geom: TriangleMesh | Bvh, origins: np.ndarray,
                   dirs: np.ndarray, t_min: float = 0.0,
                   t_max: float = np.inf):
    """Batch nearest-hit query. Returns (face, t, u, v) arrays; face=-1 miss."""
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    n = len(origins)
    out_face = np.empty(n, dtype=np.int64)
    out_t = np.empty(n)
    out_u = np.empty(n)
    out_v = np.empty(n)
    if isinstance(geom, Bvh):
        _k.bvh_intersect_batch(*geom._args(), origins, dirs, t_min, t_max,
                               out_face, out_t, out_u, out_v)
    else:
        _k.linear_intersect_batch(geom.vertices, geom.faces, origins, dirs,
                                  t_min, t_max, out_face, out_t, out_u, out_v)
    return out_face, out_t, out_u, out_v


def is_inside(geom: TriangleMesh | Bvh, point, direction=None,
              salt: int = 0) -> bool:
    """Odd-even inside test for watertight meshes.

    Without an explicit direction, grazing or near-duplicate crossings trigger
    re-shoots along hash-derived directions (max 8, then majority vote).
    """
    bvh = as_bvh(geom)
    p = np.asarray(point, dtype=np.float64)
    if direction is not None:
        d = np.asarray(direction, dtype=np.float64)
        d = d / np.linalg.norm(d)
        inside, _ = _k.parity_inside_dir(*bvh._args(), p[0], p[1], p[2],
                                         d[0], d[1], d[2])
        return bool(inside)
    return bool(_k.parity_inside(*bvh._args(), p[0], p[1], p[2], salt))


def is_inside_many(geom: TriangleMesh | Bvh, points: np.ndarray,
                   salt: int = 0) -> np.ndarray:
    bvh = as_bvh(geom)
    points = np.ascontiguousarray(points, dtype=np.float64)
    out = np.empty(len(points), dtype=np.bool_)
    _k.parity_inside_batch(*bvh._args(), points, salt, out)
    return out


def closest_distance(geom: TriangleMesh | Bvh, points: np.ndarray) -> np.ndarray:
    """Exact unsigned distance from each point to the mesh surface."""
    bvh = as_bvh(geom)
    points = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
    out = np.empty(len(points))
    _k.closest_dist_batch(*bvh._args(), points, out)
    return out
