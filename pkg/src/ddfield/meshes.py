"""Procedural test meshes: icosphere, cube, bumpy blob, plane quad."""

import numpy as np

from .mesh import TriangleMesh


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriangleMesh:
    """Icosahedron subdivided `subdivisions` times, projected to a sphere."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts[0])
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [v for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            idx = cache.get(key)
            if idx is None:
                m = verts[a] + verts[b]
                m /= np.linalg.norm(m)
                verts.append(m)
                idx = len(verts) - 1
                cache[key] = idx
            return idx

        new_faces = []
        for a, b, c in faces:
            ab = midpoint(a, b)
            bc = midpoint(b, c)
            ca = midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = np.asarray(verts) * radius
    return TriangleMesh(v, np.asarray(faces, dtype=np.int32))


def cube(half_extent: float = 1.0) -> TriangleMesh:
    """Axis-aligned cube [-h, h]^3 as 12 triangles with outward winding."""
    h = half_extent
    v = np.array([
        [-h, -h, -h], [h, -h, -h], [h, h, -h], [-h, h, -h],
        [-h, -h, h], [h, -h, h], [h, h, h], [-h, h, h],
    ], dtype=np.float64)
    quads = [
        (0, 3, 2, 1),  # -z
        (4, 5, 6, 7),  # +z
        (0, 1, 5, 4),  # -y
        (2, 3, 7, 6),  # +y
        (0, 4, 7, 3),  # -x
        (1, 2, 6, 5),  # +x
    ]
    faces = []
    for a, b, c, d in quads:
        faces += [(a, b, c), (a, c, d)]
    return TriangleMesh(v, np.asarray(faces, dtype=np.int32))


def blob(subdivisions: int = 4, seed: int = 0) -> TriangleMesh:
    """Bumpy non-convex closed surface in the few-thousand-triangle class.

    A radially perturbed icosphere: watertight, deterministic for a seed."""
    base = icosphere(subdivisions)
    rng = np.random.default_rng(seed)
    amp = 0.12 + 0.08 * rng.random(3)
    phase = 2.0 * np.pi * rng.random(3)
    v = base.vertices
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    bump = (amp[0] * np.sin(3.0 * x + phase[0]) * np.cos(2.0 * y)
            + amp[1] * np.sin(4.0 * y + phase[1]) * np.cos(3.0 * z)
            + amp[2] * np.sin(2.0 * z + phase[2]) * np.cos(4.0 * x))
    r = 1.0 + 0.5 * bump
    return TriangleMesh(v * r[:, None], base.faces)


def plane_quad(half_extent: float = 1.0, z: float = 0.0) -> TriangleMesh:
    """Two triangles spanning [-h, h]^2 at height z, normal +z."""
    h = half_extent
    v = np.array([[-h, -h, z], [h, -h, z], [h, h, z], [-h, h, z]],
                 dtype=np.float64)
    f = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int32)
    return TriangleMesh(v, f)
