"""Point-cloud metrics between reconstructed and ground-truth surfaces.

Clouds are plain (N,3) arrays. Nearest-neighbor lookups go through an exact
KD-tree; chamfer and sided distances are squared Euclidean, f-score compares
plain Euclidean distances against its threshold.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError
from .mesh import TriangleMesh

CHAMFER_REPORT_SCALE = 1e3  # reports quote chamfer in thousandths


def sample_surface(mesh: TriangleMesh, n: int, seed: int = 0) -> np.ndarray:
    """n points on the surface, faces weighted by area; deterministic."""
    if mesh.n_faces == 0:
        raise DataError("cannot sample an empty mesh")
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0.0:
        raise DataError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    faces = rng.choice(mesh.n_faces, size=n, p=areas / total)
    ab = rng.random((n, 2))
    fold = ab.sum(axis=1) > 1.0
    ab[fold] = 1.0 - ab[fold]
    tri = mesh.vertices[mesh.faces[faces]]
    a, b = ab[:, 0, None], ab[:, 1, None]
    return (1.0 - a - b) * tri[:, 0] + a * tri[:, 1] + b * tri[:, 2]


def _nearest_sq(points: np.ndarray, cloud: np.ndarray) -> np.ndarray:
    d, _ = cKDTree(cloud).query(points, k=1)
    return d ** 2


def chamfer(p1: np.ndarray, p2: np.ndarray,
            w1: float = 1.0, w2: float = 1.0) -> float:
    """Symmetric mean of squared nearest-neighbor distances.

    chamfer = w1/|P1| sum min ||p1 - p2||^2 + w2/|P2| sum min ||p2 - p1||^2.
    """
    p1 = np.atleast_2d(p1)
    p2 = np.atleast_2d(p2)
    if len(p1) == 0 or len(p2) == 0:
        raise DataError("chamfer needs non-empty clouds")
    return float(w1 * _nearest_sq(p1, p2).mean()
                 + w2 * _nearest_sq(p2, p1).mean())


def sided_distance(p, cloud: np.ndarray) -> float:
    """Squared distance from one point to its nearest neighbor in the cloud."""
    cloud = np.atleast_2d(cloud)
    if len(cloud) == 0:
        raise DataError("sided distance needs a non-empty cloud")
    return float(_nearest_sq(np.atleast_2d(p), cloud)[0])


def sided_profile(p1: np.ndarray, p2: np.ndarray) -> np.ndarray:
    """Per-point squared nearest distances from P1 into P2 (for percentiles)."""
    p1 = np.atleast_2d(p1)
    p2 = np.atleast_2d(p2)
    if len(p1) == 0 or len(p2) == 0:
        raise DataError("sided profile needs non-empty clouds")
    return _nearest_sq(p1, p2)


def f_score(p1: np.ndarray, p2: np.ndarray, tau: float) -> float:
    """Harmonic mean of precision and recall at Euclidean threshold tau."""
    if tau <= 0.0:
        raise ValueError("tau must be positive")
    d12 = np.sqrt(_nearest_sq(np.atleast_2d(p1), np.atleast_2d(p2)))
    d21 = np.sqrt(_nearest_sq(np.atleast_2d(p2), np.atleast_2d(p1)))
    precision = float((d12 <= tau).mean())
    recall = float((d21 <= tau).mean())
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)
