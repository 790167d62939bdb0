"""Directed distance field core: the oriented-point domain, a uniform query
interface over exact and learned backends, and the field's geometric
identities as executable operations.

A field value is the distance from a point to the first surface hit along a
viewing direction; a miss is reported as None at the scalar level and as a
False entry of the hit mask in batch results, never as a large float.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import neural
from .errors import NumericError
from .mesh import Bvh, TriangleMesh, as_bvh, closest_distance, intersect_rays

TWO_PI = 2.0 * np.pi

# fraction of the clamp band at which a neural prediction counts as a miss
MISS_FRACTION = 0.98


@dataclass(frozen=True)
class Direction2:
    """Viewing direction as two angles: azimuth in [0, 2pi), polar in [0, pi].

    The polar angle is measured from +z, matching the component formula
    (cos t0 sin t1, sin t0 sin t1, cos t1).
    """

    theta0: float
    theta1: float

    def as_array(self) -> np.ndarray:
        return np.array([self.theta0, self.theta1])


@dataclass(frozen=True)
class OrientedPoint:
    """A position paired with a viewing direction: the field's query key."""

    position: np.ndarray
    direction: Direction2

    def __post_init__(self):
        object.__setattr__(self, "position",
                           np.asarray(self.position, dtype=np.float64))


def dir_to_vec(d: Direction2) -> np.ndarray:
    """Unit vector (cos t0 sin t1, sin t0 sin t1, cos t1)."""
    s1 = np.sin(d.theta1)
    return np.array([np.cos(d.theta0) * s1, np.sin(d.theta0) * s1,
                     np.cos(d.theta1)])


def vec_to_dir(v) -> Direction2:
    """Angles of a unit vector; the inverse of dir_to_vec away from poles."""
    v = np.asarray(v, dtype=np.float64)
    theta1 = float(np.arccos(np.clip(v[2], -1.0, 1.0)))
    theta0 = float(np.arctan2(v[1], v[0])) % TWO_PI
    return Direction2(theta0, theta1)


def angles_to_vecs(angles: np.ndarray) -> np.ndarray:
    """(N,2) angle rows -> (N,3) unit vectors."""
    angles = np.atleast_2d(angles)
    s1 = np.sin(angles[:, 1])
    return np.stack([np.cos(angles[:, 0]) * s1, np.sin(angles[:, 0]) * s1,
                     np.cos(angles[:, 1])], axis=1)


def vecs_to_angles(vecs: np.ndarray) -> np.ndarray:
    """(N,3) unit vectors -> (N,2) canonical angle rows."""
    vecs = np.atleast_2d(vecs)
    theta1 = np.arccos(np.clip(vecs[:, 2], -1.0, 1.0))
    theta0 = np.arctan2(vecs[:, 1], vecs[:, 0]) % TWO_PI
    return np.stack([theta0, theta1], axis=1)


def advance(p: OrientedPoint, t: float) -> np.ndarray:
    """Position t along the viewing direction from p."""
    return p.position + t * dir_to_vec(p.direction)


def orthonormal_frame(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two unit vectors spanning the plane orthogonal to v.

    Deterministic smallest-component construction."""
    v = np.asarray(v, dtype=np.float64)
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(v)))] = 1.0
    u1 = np.cross(v, axis)
    u1 /= np.linalg.norm(u1)
    u2 = np.cross(v, u1)
    return u1, u2


def orthonormal_frames(vecs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batch orthonormal_frame over (N,3) unit vectors."""
    vecs = np.atleast_2d(vecs)
    n = len(vecs)
    axis = np.zeros((n, 3))
    axis[np.arange(n), np.argmin(np.abs(vecs), axis=1)] = 1.0
    u1 = np.cross(vecs, axis)
    u1 /= np.linalg.norm(u1, axis=1, keepdims=True)
    u2 = np.cross(vecs, u1)
    return u1, u2


def _van_der_corput(idx: np.ndarray, base: int) -> np.ndarray:
    out = np.zeros(len(idx))
    f = 1.0 / base
    i = idx.copy()
    while np.any(i > 0):
        out += f * (i % base)
        i //= base
        f /= base
    return out


def sphere_directions(n: int) -> np.ndarray:
    """(n,3) low-discrepancy unit vectors with the prefix property.

    Halton(2,3) mapped area-preservingly onto the sphere: the first n points
    of a longer set are exactly this set, so a min over directions can only
    go down as n grows.
    """
    if n < 1:
        raise ValueError("need at least one direction")
    idx = np.arange(1, n + 1)
    u = _van_der_corput(idx, 2)
    v = _van_der_corput(idx, 3)
    z = 1.0 - 2.0 * u
    phi = TWO_PI * v
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


class _MeshField:
    """Shared behaviour of the exact mesh-backed backends."""

    exact_udf = True

    def __init__(self, geom: TriangleMesh | Bvh):
        self._geom = geom
        mesh = geom.mesh if isinstance(geom, Bvh) else geom
        self.mesh = mesh
        # the field's domain box B: the surface bbox grown by one diagonal,
        # so ordinary exterior queries (cameras, marched samples) sit inside
        diag = float(np.linalg.norm(mesh.bbox[1] - mesh.bbox[0]))
        self.bounds = np.stack([mesh.bbox[0] - diag, mesh.bbox[1] + diag])
        # tighter box for grid evaluation: surface bbox plus a small margin
        self.grid_bounds = np.stack([mesh.bbox[0] - 0.05 * diag,
                                     mesh.bbox[1] + 0.05 * diag])

    def query_batch(self, positions: np.ndarray, dir_vecs: np.ndarray):
        """(t, hit) arrays for positions (N,3) and unit directions (N,3)."""
        face, t, _, _ = intersect_rays(self._geom, positions, dir_vecs)
        hit = face >= 0
        return t, hit

    # camera rays use the same exact query
    trace_batch = query_batch

    def normal_batch(self, origins: np.ndarray, dir_vecs: np.ndarray,
                     t_hit=None):
        """Hit-face normals flipped so n . dir < 0. Returns (normals, valid)."""
        face, _, _, _ = intersect_rays(self._geom, origins, dir_vecs)
        valid = face >= 0
        normals = np.zeros((len(origins), 3))
        if valid.any():
            mesh = self.mesh
            f = face[valid]
            v = mesh.vertices
            fv = mesh.faces[f]
            n = np.cross(v[fv[:, 1]] - v[fv[:, 0]], v[fv[:, 2]] - v[fv[:, 0]])
            n /= np.linalg.norm(n, axis=1, keepdims=True)
            dots = np.einsum("ij,ij->i", n, np.atleast_2d(dir_vecs)[valid])
            n[dots > 0.0] *= -1.0
            normals[valid] = n
        return normals, valid

    def exact_distance(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class OracleField(_MeshField):
    """Exact ground-truth field over a mesh, accelerated by a BVH."""

    def __init__(self, geom: TriangleMesh | Bvh):
        super().__init__(as_bvh(geom))

    def exact_distance(self, points: np.ndarray) -> np.ndarray:
        return closest_distance(self._geom, points)


class BruteForceField(_MeshField):
    """Reference field that scans every triangle on every query."""

    def __init__(self, mesh: TriangleMesh):
        if isinstance(mesh, Bvh):
            mesh = mesh.mesh
        super().__init__(mesh)

    def exact_distance(self, points: np.ndarray) -> np.ndarray:
        from . import _kernels as _k
        points = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
        out = np.empty(len(points))
        _k.linear_closest_batch(self.mesh.vertices, self.mesh.faces, points, out)
        return out


class NeuralField:
    """Trained network as a field backend.

    A plain query is one forward pass: the prediction is clamped to the
    training band and values at or beyond MISS_FRACTION * delta count as a
    miss. Camera rays go through trace_batch, which sphere-marches in steps
    of 0.9 * delta (safe under the directed eikonal property) until the
    prediction drops into the band or the ray leaves the domain box.
    """

    exact_udf = False
    DEFAULT_BOUNDS = np.array([[-1.1, -1.1, -1.1], [1.1, 1.1, 1.1]])

    def __init__(self, model: neural.MlpModel, delta: float, bounds=None):
        self.model = model
        self.delta = float(delta)
        self.bounds = (np.asarray(bounds, dtype=np.float64)
                       if bounds is not None else self.DEFAULT_BOUNDS.copy())
        self.grid_bounds = self.bounds
        self.normal_eval_backoff = 0.5 * self.delta

    @classmethod
    def from_checkpoint(cls, path, bounds=None) -> "NeuralField":
        model, delta = neural.load_model(path)
        return cls(model, delta, bounds=bounds)

    def _predict(self, positions: np.ndarray, angles: np.ndarray) -> np.ndarray:
        inputs = neural.encode_inputs(positions, angles)
        return neural.forward_batch(self.model, inputs)

    def query_batch_angles(self, positions: np.ndarray, angles: np.ndarray):
        # canonicalize angles through the vector form so the network always
        # sees the encoding it was trained on
        angles = vecs_to_angles(angles_to_vecs(angles))
        pred = self._predict(np.atleast_2d(positions), angles)
        clamped = np.clip(pred, -self.delta, self.delta)
        hit = clamped < MISS_FRACTION * self.delta
        return np.maximum(clamped, 0.0), hit

    def query_batch(self, positions: np.ndarray, dir_vecs: np.ndarray):
        return self.query_batch_angles(positions, vecs_to_angles(dir_vecs))

    def trace_batch(self, origins: np.ndarray, dir_vecs: np.ndarray):
        origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
        dir_vecs = np.atleast_2d(np.asarray(dir_vecs, dtype=np.float64))
        n = len(origins)
        angles = vecs_to_angles(dir_vecs)
        t_enter, t_exit = _ray_box(origins, dir_vecs, self.bounds)
        alive = (t_enter < t_exit) & (t_exit > 0.0)
        t_acc = np.where(alive, np.maximum(t_enter, 0.0), 0.0)
        t_out = np.full(n, np.inf)
        hit = np.zeros(n, dtype=bool)
        step = 0.9 * self.delta
        thresh = MISS_FRACTION * self.delta
        diag = float(np.linalg.norm(self.bounds[1] - self.bounds[0]))
        max_steps = int(np.ceil(diag / step)) + 4
        for _ in range(max_steps):
            if not alive.any():
                break
            idx = np.nonzero(alive)[0]
            pos = origins[idx] + t_acc[idx, None] * dir_vecs[idx]
            pred = self._predict(pos, angles[idx])
            clamped = np.clip(pred, -self.delta, self.delta)
            found = clamped < thresh
            sel = idx[found]
            t_out[sel] = t_acc[sel] + np.maximum(clamped[found], 0.0)
            hit[sel] = True
            alive[sel] = False
            t_acc[idx[~found]] += step
            stale = alive & (t_acc > t_exit)
            alive &= ~stale
        return t_out, hit

    def input_gradients(self, positions: np.ndarray, angles: np.ndarray) -> np.ndarray:
        inputs = neural.encode_inputs(positions, angles)
        return neural.input_gradient_batch(self.model, inputs)

    def normal_batch(self, origins: np.ndarray, dir_vecs: np.ndarray,
                     t_hit=None):
        """Normals from the spatial input gradient, flipped so n . dir < 0.

        With t_hit given, the gradient is evaluated half a clamp band before
        the surface along the ray, inside the trained region. Degenerate
        (zero-gradient) rows come back invalid.
        """
        origins = np.atleast_2d(origins)
        dir_vecs = np.atleast_2d(dir_vecs)
        if t_hit is not None:
            back = np.maximum(np.asarray(t_hit) - self.normal_eval_backoff, 0.0)
            pos = origins + back[:, None] * dir_vecs
        else:
            pos = origins
        grads = self.input_gradients(pos, vecs_to_angles(dir_vecs))[:, :3]
        norms = np.linalg.norm(grads, axis=1)
        valid = norms >= 1e-12
        normals = np.zeros_like(grads)
        normals[valid] = grads[valid] / norms[valid, None]
        dots = np.einsum("ij,ij->i", normals, dir_vecs)
        normals[dots > 0.0] *= -1.0
        return normals, valid


DdfBackend = OracleField | BruteForceField | NeuralField


def _ray_box(origins: np.ndarray, dirs: np.ndarray, bounds: np.ndarray):
    """Vectorized slab test; returns (t_enter, t_exit), enter > exit on miss."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (bounds[0] - origins) * inv
        t1 = (bounds[1] - origins) * inv
    lo = np.minimum(t0, t1)
    hi = np.maximum(t0, t1)
    # zero-direction axes: inside slab -> (-inf, inf), outside -> empty
    zero = dirs == 0.0
    if zero.any():
        inside = (origins >= bounds[0]) & (origins <= bounds[1])
        lo = np.where(zero, np.where(inside, -np.inf, np.inf), lo)
        hi = np.where(zero, np.where(inside, np.inf, -np.inf), hi)
    return lo.max(axis=1), hi.min(axis=1)


def _check_in_bounds(backend, p: OrientedPoint) -> None:
    if (p.position < backend.bounds[0] - 1e-9).any() or \
            (p.position > backend.bounds[1] + 1e-9).any():
        warnings.warn(f"oriented point {p.position} lies outside the field box",
                      stacklevel=3)


def query(backend, p: OrientedPoint) -> float | None:
    """Field value at an oriented point; None on miss."""
    _check_in_bounds(backend, p)
    t, hit = backend.query_batch(p.position[None, :],
                                 dir_to_vec(p.direction)[None, :])
    return float(t[0]) if hit[0] else None


def visibility(backend, p: OrientedPoint) -> bool:
    """True iff the ray from p meets the surface (query is finite)."""
    return query(backend, p) is not None


def surface_point(backend, p: OrientedPoint) -> np.ndarray:
    """The point where the ray first meets the surface."""
    t = query(backend, p)
    if t is None:
        raise ValueError("no surface in direction")
    return advance(p, t)


def field_normal(backend, p: OrientedPoint) -> np.ndarray:
    """Unit surface normal at the hit, oriented so that n . direction < 0.

    Exact backends return the hit face's geometric normal; the neural backend
    normalizes its spatial input gradient.
    """
    d = dir_to_vec(p.direction)
    normals, valid = backend.normal_batch(p.position[None, :], d[None, :])
    if not valid[0]:
        if isinstance(backend, NeuralField):
            # distinguish invisible from degenerate gradient
            _, hit = backend.query_batch(p.position[None, :], d[None, :])
            if hit[0]:
                raise NumericError("degenerate gradient")
        raise ValueError("no surface in direction")
    n = normals[0]
    if float(n @ d) >= 0.0:
        raise NumericError("normal not transverse to the viewing direction")
    return n


def udf(backend, x, n_dirs: int = 512, exact: bool | None = None,
        polish: bool = True) -> float | None:
    """Unsigned distance at x: the minimum field value over directions.

    Exact mesh backends shortcut to the closest point on the surface. The
    sampled route takes the min over a nested low-discrepancy direction set
    and polishes each angle with golden-section around the best direction;
    it upper-bounds the exact distance and is non-increasing in n_dirs.
    Returns None when every direction misses.
    """
    if n_dirs < 2:
        raise ValueError("need n_dirs >= 2")
    x = np.asarray(x, dtype=np.float64)
    vals = udf_many(backend, x[None, :], n_dirs=n_dirs, exact=exact,
                    polish=polish)
    v = float(vals[0])
    return None if np.isinf(v) else v


_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def _eval_angles(backend, points, theta0, theta1):
    """Query a batch of per-point angle pairs; returns values with inf=miss."""
    angles = np.stack([theta0, theta1], axis=1)
    t, hit = backend.query_batch(points, angles_to_vecs(angles))
    return np.where(hit, t, np.inf)


def udf_many(backend, points: np.ndarray, n_dirs: int = 512,
             exact: bool | None = None, polish: bool = True,
             chunk: int = 250_000) -> np.ndarray:
    """Vectorized udf over (P,3) points; inf marks all-miss points."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if exact is None:
        exact = getattr(backend, "exact_udf", False)
    if exact:
        return backend.exact_distance(points)

    n_pts = len(points)
    dirs = sphere_directions(n_dirs)
    best = np.full(n_pts, np.inf)
    best_ang = np.zeros((n_pts, 2))
    group = max(1, min(n_dirs, chunk // max(n_pts, 1)))
    for lo in range(0, n_dirs, group):
        sub = dirs[lo:lo + group]
        rep_p = np.repeat(points, len(sub), axis=0)
        rep_d = np.tile(sub, (n_pts, 1))
        t, hit = backend.query_batch(rep_p, rep_d)
        vals = np.where(hit, t, np.inf).reshape(n_pts, len(sub))
        arg = vals.argmin(axis=1)
        cand = vals[np.arange(n_pts), arg]
        better = cand < best
        best[better] = cand[better]
        best_ang[better] = vecs_to_angles(sub[arg[better]])

    if not polish:
        return best

    # lockstep golden-section polish on each angle around the best direction
    h = 3.0 / np.sqrt(n_dirs)
    found = np.isfinite(best)
    if not found.any():
        return best
    pts = points[found]
    ang = best_ang[found].copy()
    val = best[found].copy()
    for _ in range(2):
        for axis in (1, 0):
            a = ang[:, axis] - h
            b = ang[:, axis] + h
            if axis == 1:
                a = np.clip(a, 0.0, np.pi)
                b = np.clip(b, 0.0, np.pi)
            x1 = b - _GOLDEN * (b - a)
            x2 = a + _GOLDEN * (b - a)
            other = ang[:, 1 - axis]

            def probe(x, axis=axis, other=other, pts=pts):
                if axis == 0:
                    return _eval_angles(backend, pts, x, other)
                return _eval_angles(backend, pts, other, x)

            f1 = probe(x1)
            f2 = probe(x2)
            for _ in range(12):
                shrink_left = f1 > f2  # minimum sits in the right part
                a = np.where(shrink_left, x1, a)
                b = np.where(shrink_left, b, x2)
                x1 = b - _GOLDEN * (b - a)
                x2 = a + _GOLDEN * (b - a)
                f1 = probe(x1)
                f2 = probe(x2)
            xs = np.where(f1 < f2, x1, x2)
            fs = np.minimum(f1, f2)
            improved = fs < val
            val[improved] = fs[improved]
            ang[improved, axis] = xs[improved]
    best[found] = val
    return best


def check_eikonal(backend, p: OrientedPoint, t: float) -> float:
    """Residual of the marching identity: |phi(x) - phi(x + t d) - t|.

    Exact backends satisfy this to rounding; for a trained network it is a
    diagnostic."""
    phi0 = query(backend, p)
    if phi0 is None:
        raise ValueError("no surface in direction")
    if not 0.0 < t < phi0:
        raise ValueError("need 0 < t < query(p)")
    moved = OrientedPoint(advance(p, t), p.direction)
    phi1 = query(backend, moved)
    if phi1 is None:
        return np.inf
    return abs(phi0 - phi1 - t)


def _dir_jacobian(d: Direction2) -> np.ndarray:
    """(3,2) Jacobian of dir_to_vec with respect to (azimuth, polar)."""
    s0, c0 = np.sin(d.theta0), np.cos(d.theta0)
    s1, c1 = np.sin(d.theta1), np.cos(d.theta1)
    return np.array([[-s0 * s1, c0 * c1],
                     [c0 * s1, s0 * c1],
                     [0.0, -s1]])


def check_gradient_consistency(backend, p: OrientedPoint, dtheta,
                               fd_eps: float = 1e-5) -> float:
    """Residual of the direction/position gradient coupling (diagnostic).

    A small angular perturbation dtheta = (d azimuth, d polar) changes the
    field like a lateral displacement of the query point scaled by the field
    value itself. Both sides are evaluated with the network's input gradients
    for a neural backend and with central finite differences otherwise.
    """
    dtheta = np.asarray(dtheta, dtype=np.float64)
    if np.linalg.norm(dtheta) > 1e-3 + 1e-12:
        raise ValueError("|dtheta| must be <= 1e-3")
    if not np.any(dtheta):
        return 0.0
    phi0 = query(backend, p)
    if phi0 is None:
        raise ValueError("no surface in direction")
    jac = _dir_jacobian(p.direction)
    v_ind = jac @ dtheta

    if isinstance(backend, NeuralField):
        g = backend.input_gradients(p.position[None, :],
                                    p.direction.as_array()[None, :])[0]
        # undo the input scaling of the angle channels
        d_ang = np.array([g[3] / np.pi, g[4] * 2.0 / np.pi])
        lhs = float(d_ang @ dtheta)
        rhs = phi0 * float(g[:3] @ v_ind)
        return abs(lhs - rhs)

    d_plus = Direction2(p.direction.theta0 + dtheta[0],
                        p.direction.theta1 + dtheta[1])
    d_minus = Direction2(p.direction.theta0 - dtheta[0],
                         p.direction.theta1 - dtheta[1])
    f_plus = query(backend, OrientedPoint(p.position, d_plus))
    f_minus = query(backend, OrientedPoint(p.position, d_minus))
    if f_plus is None or f_minus is None:
        return np.inf
    lhs = 0.5 * (f_plus - f_minus)

    norm_ind = np.linalg.norm(v_ind)
    vhat = v_ind / norm_ind
    f_a = query(backend, OrientedPoint(p.position + fd_eps * vhat, p.direction))
    f_b = query(backend, OrientedPoint(p.position - fd_eps * vhat, p.direction))
    if f_a is None or f_b is None:
        return np.inf
    rhs = phi0 * (f_a - f_b) / (2.0 * fd_eps) * norm_ind
    return abs(lhs - rhs)
