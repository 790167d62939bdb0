"""Numba kernels for exact mesh geometry queries.

All ray-triangle work funnels through one Moller-Trumbore routine so that the
BVH and the linear scan produce bit-identical hits. Parity (inside/outside)
retries use a counter-based splitmix64 hash, which keeps results independent
of thread count and run order.
"""

import numba
import numpy as np
from numba import njit, prange

# skip the TBB probe (the sandbox TBB is too old and only emits a warning)
numba.config.THREADING_LAYER = "omp"

DET_EPS = 1e-9      # Moller-Trumbore determinant cutoff
EDGE_EPS = 1e-7     # barycentric edge proximity that marks a parity hit degenerate
GRAZE_EPS = 1e-7    # two parity crossings closer than this are treated as one graze
SELF_EPS = 1e-7     # skip distance for rays leaving their own face
MAX_PARITY_HITS = 128

_U_A = np.uint64(0x9E3779B97F4A7C15)
_U_B = np.uint64(0xBF58476D1CE4E5B9)
_U_C = np.uint64(0x94D049BB133111EB)
_INV_2_53 = 1.0 / 9007199254740992.0


@njit(cache=True, inline="always")
def _splitmix64(x):
    x = np.uint64(x + _U_A)
    z = np.uint64((x ^ (x >> np.uint64(30))) * _U_B)
    z = np.uint64((z ^ (z >> np.uint64(27))) * _U_C)
    return np.uint64(z ^ (z >> np.uint64(31)))


@njit(cache=True, inline="always")
def _hash_unit(h):
    """Map a 64-bit hash to a float in [0, 1)."""
    return np.float64(h >> np.uint64(11)) * _INV_2_53


@njit(cache=True, inline="always")
def _ray_tri(ox, oy, oz, dx, dy, dz,
             ax, ay, az, bx, by, bz, cx, cy, cz):
    """Moller-Trumbore. Returns (t, u, v); t = inf on miss."""
    e1x = bx - ax
    e1y = by - ay
    e1z = bz - az
    e2x = cx - ax
    e2y = cy - ay
    e2z = cz - az
    # h = d x e2
    hx = dy * e2z - dz * e2y
    hy = dz * e2x - dx * e2z
    hz = dx * e2y - dy * e2x
    det = e1x * hx + e1y * hy + e1z * hz
    if -DET_EPS < det < DET_EPS:
        return np.inf, 0.0, 0.0
    f = 1.0 / det
    sx = ox - ax
    sy = oy - ay
    sz = oz - az
    u = f * (sx * hx + sy * hy + sz * hz)
    if u < 0.0 or u > 1.0:
        return np.inf, 0.0, 0.0
    # q = s x e1
    qx = sy * e1z - sz * e1y
    qy = sz * e1x - sx * e1z
    qz = sx * e1y - sy * e1x
    v = f * (dx * qx + dy * qy + dz * qz)
    if v < 0.0 or u + v > 1.0:
        return np.inf, 0.0, 0.0
    t = f * (e2x * qx + e2y * qy + e2z * qz)
    return t, u, v


@njit(cache=True, inline="always")
def _slab_enter(ox, oy, oz, dx, dy, dz,
                minx, miny, minz, maxx, maxy, maxz, t0, t1):
    """Ray/AABB overlap with [t0, t1]. Returns entry t, or inf on miss."""
    tmin = t0
    tmax = t1
    if dx != 0.0:
        inv = 1.0 / dx
        a = (minx - ox) * inv
        b = (maxx - ox) * inv
        if a > b:
            a, b = b, a
        if a > tmin:
            tmin = a
        if b < tmax:
            tmax = b
    elif ox < minx or ox > maxx:
        return np.inf
    if dy != 0.0:
        inv = 1.0 / dy
        a = (miny - oy) * inv
        b = (maxy - oy) * inv
        if a > b:
            a, b = b, a
        if a > tmin:
            tmin = a
        if b < tmax:
            tmax = b
    elif oy < miny or oy > maxy:
        return np.inf
    if dz != 0.0:
        inv = 1.0 / dz
        a = (minz - oz) * inv
        b = (maxz - oz) * inv
        if a > b:
            a, b = b, a
        if a > tmin:
            tmin = a
        if b < tmax:
            tmax = b
    elif oz < minz or oz > maxz:
        return np.inf
    if tmin > tmax:
        return np.inf
    return tmin


@njit(cache=True)
def linear_intersect(verts, faces,
                     ox, oy, oz, dx, dy, dz, t_min, t_max):
    """Nearest hit by scanning every face. Returns (face, t, u, v); face=-1 miss.

    Ties on t go to the lower face index (scan order)."""
    best_f = -1
    best_t = np.inf
    best_u = 0.0
    best_v = 0.0
    for i in range(faces.shape[0]):
        i0 = faces[i, 0]
        i1 = faces[i, 1]
        i2 = faces[i, 2]
        t, u, v = _ray_tri(ox, oy, oz, dx, dy, dz,
                           verts[i0, 0], verts[i0, 1], verts[i0, 2],
                           verts[i1, 0], verts[i1, 1], verts[i1, 2],
                           verts[i2, 0], verts[i2, 1], verts[i2, 2])
        if t_min <= t <= t_max and t < best_t:
            best_f = i
            best_t = t
            best_u = u
            best_v = v
    return best_f, best_t, best_u, best_v


@njit(cache=True)
def bvh_intersect(verts, faces, nmin, nmax, left, right, start, count, prim,
                  ox, oy, oz, dx, dy, dz, t_min, t_max):
    """Nearest hit via BVH. Result identical to linear_intersect."""
    best_f = -1
    best_t = np.inf
    best_u = 0.0
    best_v = 0.0
    stack = np.empty(64, dtype=np.int32)
    sp = 0
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        limit = best_t if best_t < t_max else t_max
        enter = _slab_enter(ox, oy, oz, dx, dy, dz,
                            nmin[node, 0], nmin[node, 1], nmin[node, 2],
                            nmax[node, 0], nmax[node, 1], nmax[node, 2],
                            t_min, limit)
        if enter == np.inf:
            continue
        if left[node] < 0:
            s = start[node]
            for k in range(count[node]):
                i = prim[s + k]
                i0 = faces[i, 0]
                i1 = faces[i, 1]
                i2 = faces[i, 2]
                t, u, v = _ray_tri(ox, oy, oz, dx, dy, dz,
                                   verts[i0, 0], verts[i0, 1], verts[i0, 2],
                                   verts[i1, 0], verts[i1, 1], verts[i1, 2],
                                   verts[i2, 0], verts[i2, 1], verts[i2, 2])
                if t_min <= t <= t_max:
                    if t < best_t or (t == best_t and i < best_f):
                        best_f = i
                        best_t = t
                        best_u = u
                        best_v = v
        else:
            # near child popped first
            lc = left[node]
            rc = right[node]
            el = _slab_enter(ox, oy, oz, dx, dy, dz,
                             nmin[lc, 0], nmin[lc, 1], nmin[lc, 2],
                             nmax[lc, 0], nmax[lc, 1], nmax[lc, 2],
                             t_min, limit)
            er = _slab_enter(ox, oy, oz, dx, dy, dz,
                             nmin[rc, 0], nmin[rc, 1], nmin[rc, 2],
                             nmax[rc, 0], nmax[rc, 1], nmax[rc, 2],
                             t_min, limit)
            if el <= er:
                if er != np.inf:
                    stack[sp] = rc
                    sp += 1
                if el != np.inf:
                    stack[sp] = lc
                    sp += 1
            else:
                if el != np.inf:
                    stack[sp] = lc
                    sp += 1
                if er != np.inf:
                    stack[sp] = rc
                    sp += 1
    return best_f, best_t, best_u, best_v


@njit(cache=True, parallel=True)
def bvh_intersect_batch(verts, faces, nmin, nmax, left, right, start, count,
                        prim, origins, dirs, t_min, t_max,
                        out_face, out_t, out_u, out_v):
    for i in prange(origins.shape[0]):
        f, t, u, v = bvh_intersect(
            verts, faces, nmin, nmax, left, right, start, count, prim,
            origins[i, 0], origins[i, 1], origins[i, 2],
            dirs[i, 0], dirs[i, 1], dirs[i, 2], t_min, t_max)
        out_face[i] = f
        out_t[i] = t
        out_u[i] = u
        out_v[i] = v


@njit(cache=True, parallel=True)
def linear_intersect_batch(verts, faces, origins, dirs, t_min, t_max,
                           out_face, out_t, out_u, out_v):
    for i in prange(origins.shape[0]):
        f, t, u, v = linear_intersect(
            verts, faces,
            origins[i, 0], origins[i, 1], origins[i, 2],
            dirs[i, 0], dirs[i, 1], dirs[i, 2], t_min, t_max)
        out_face[i] = f
        out_t[i] = t
        out_u[i] = u
        out_v[i] = v


@njit(cache=True)
def _all_hits(verts, faces, nmin, nmax, left, right, start, count, prim,
              ox, oy, oz, dx, dy, dz, ts):
    """Collect every crossing with t > 0 along the ray.

    Returns (n, degenerate). Degenerate when a hit grazes an edge, sits on the
    origin, two crossings nearly coincide, or the buffer overflows."""
    n = 0
    degenerate = False
    stack = np.empty(64, dtype=np.int32)
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        enter = _slab_enter(ox, oy, oz, dx, dy, dz,
                            nmin[node, 0], nmin[node, 1], nmin[node, 2],
                            nmax[node, 0], nmax[node, 1], nmax[node, 2],
                            0.0, np.inf)
        if enter == np.inf:
            continue
        if left[node] < 0:
            s = start[node]
            for k in range(count[node]):
                i = prim[s + k]
                i0 = faces[i, 0]
                i1 = faces[i, 1]
                i2 = faces[i, 2]
                t, u, v = _ray_tri(ox, oy, oz, dx, dy, dz,
                                   verts[i0, 0], verts[i0, 1], verts[i0, 2],
                                   verts[i1, 0], verts[i1, 1], verts[i1, 2],
                                   verts[i2, 0], verts[i2, 1], verts[i2, 2])
                if t == np.inf or t <= 0.0:
                    continue
                if (t < GRAZE_EPS or u < EDGE_EPS or v < EDGE_EPS
                        or u + v > 1.0 - EDGE_EPS):
                    degenerate = True
                if n >= MAX_PARITY_HITS:
                    return n, True
                ts[n] = t
                n += 1
        else:
            stack[sp] = left[node]
            sp += 1
            stack[sp] = right[node]
            sp += 1
    for a in range(n):
        for b in range(a + 1, n):
            d = ts[a] - ts[b]
            if -GRAZE_EPS < d < GRAZE_EPS:
                degenerate = True
    return n, degenerate


@njit(cache=True, inline="always")
def _hash_direction(h):
    """Uniform direction on the sphere from a hash state; returns new state."""
    h1 = _splitmix64(h)
    h2 = _splitmix64(h1)
    z = 2.0 * _hash_unit(h1) - 1.0
    phi = 6.283185307179586 * _hash_unit(h2)
    r = np.sqrt(max(0.0, 1.0 - z * z))
    return r * np.cos(phi), r * np.sin(phi), z, h2


@njit(cache=True)
def parity_inside(verts, faces, nmin, nmax, left, right, start, count, prim,
                  px, py, pz, salt):
    """Odd-even inside test with degeneracy retries and majority fallback."""
    # outside the root bbox is always outside
    if (px < nmin[0, 0] or px > nmax[0, 0]
            or py < nmin[0, 1] or py > nmax[0, 1]
            or pz < nmin[0, 2] or pz > nmax[0, 2]):
        return False
    h = np.uint64(salt)
    h = _splitmix64(h ^ np.float64(px).view(np.uint64))
    h = _splitmix64(h ^ np.float64(py).view(np.uint64))
    h = _splitmix64(h ^ np.float64(pz).view(np.uint64))
    ts = np.empty(MAX_PARITY_HITS, dtype=np.float64)
    votes_in = 0
    attempts = 0
    for _ in range(8):
        dx, dy, dz, h = _hash_direction(h)
        n, degenerate = _all_hits(verts, faces, nmin, nmax, left, right,
                                  start, count, prim, px, py, pz, dx, dy, dz,
                                  ts)
        if not degenerate:
            return (n & 1) == 1
        attempts += 1
        votes_in += n & 1
    return 2 * votes_in > attempts


@njit(cache=True)
def parity_inside_dir(verts, faces, nmin, nmax, left, right, start, count,
                      prim, px, py, pz, dx, dy, dz):
    """Single-direction crossing parity (no retries). Returns (inside, degenerate)."""
    if (px < nmin[0, 0] or px > nmax[0, 0]
            or py < nmin[0, 1] or py > nmax[0, 1]
            or pz < nmin[0, 2] or pz > nmax[0, 2]):
        return False, False
    ts = np.empty(MAX_PARITY_HITS, dtype=np.float64)
    n, degenerate = _all_hits(verts, faces, nmin, nmax, left, right,
                              start, count, prim, px, py, pz, dx, dy, dz, ts)
    return (n & 1) == 1, degenerate


@njit(cache=True, parallel=True)
def parity_inside_batch(verts, faces, nmin, nmax, left, right, start, count,
                        prim, points, salt, out):
    for i in prange(points.shape[0]):
        out[i] = parity_inside(verts, faces, nmin, nmax, left, right, start,
                               count, prim,
                               points[i, 0], points[i, 1], points[i, 2], salt)


@njit(cache=True, inline="always")
def _point_tri_dist_sq(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
    """Squared distance from a point to a triangle (Ericson)."""
    abx = bx - ax
    aby = by - ay
    abz = bz - az
    acx = cx - ax
    acy = cy - ay
    acz = cz - az
    apx = px - ax
    apy = py - ay
    apz = pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return apx * apx + apy * apy + apz * apz
    bpx = px - bx
    bpy = py - by
    bpz = pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bpx * bpx + bpy * bpy + bpz * bpz
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        w = d1 / (d1 - d3) if d1 - d3 != 0.0 else 0.0
        ex = apx - w * abx
        ey = apy - w * aby
        ez = apz - w * abz
        return ex * ex + ey * ey + ez * ez
    cpx = px - cx
    cpy = py - cy
    cpz = pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cpx * cpx + cpy * cpy + cpz * cpz
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6) if d2 - d6 != 0.0 else 0.0
        ex = apx - w * acx
        ey = apy - w * acy
        ez = apz - w * acz
        return ex * ex + ey * ey + ez * ez
    va = d3 * d6 - d5 * d4
    e1 = d4 - d3
    e2 = d5 - d6
    if va <= 0.0 and e1 >= 0.0 and e2 >= 0.0:
        w = e1 / (e1 + e2) if e1 + e2 != 0.0 else 0.0
        ex = bpx - w * (cx - bx)
        ey = bpy - w * (cy - by)
        ez = bpz - w * (cz - bz)
        return ex * ex + ey * ey + ez * ez
    denom = va + vb + vc
    if denom == 0.0:
        return apx * apx + apy * apy + apz * apz
    v = vb / denom
    w = vc / denom
    ex = apx - v * abx - w * acx
    ey = apy - v * aby - w * acy
    ez = apz - v * abz - w * acz
    return ex * ex + ey * ey + ez * ez


@njit(cache=True, inline="always")
def _bbox_dist_sq(px, py, pz, minx, miny, minz, maxx, maxy, maxz):
    d = 0.0
    if px < minx:
        e = minx - px
        d += e * e
    elif px > maxx:
        e = px - maxx
        d += e * e
    if py < miny:
        e = miny - py
        d += e * e
    elif py > maxy:
        e = py - maxy
        d += e * e
    if pz < minz:
        e = minz - pz
        d += e * e
    elif pz > maxz:
        e = pz - maxz
        d += e * e
    return d


@njit(cache=True)
def closest_dist(verts, faces, nmin, nmax, left, right, start, count, prim,
                 px, py, pz):
    """Exact distance from a point to the mesh surface (BVH nearest)."""
    best = np.inf
    stack = np.empty(64, dtype=np.int32)
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        d = _bbox_dist_sq(px, py, pz,
                          nmin[node, 0], nmin[node, 1], nmin[node, 2],
                          nmax[node, 0], nmax[node, 1], nmax[node, 2])
        if d >= best:
            continue
        if left[node] < 0:
            s = start[node]
            for k in range(count[node]):
                i = prim[s + k]
                i0 = faces[i, 0]
                i1 = faces[i, 1]
                i2 = faces[i, 2]
                dd = _point_tri_dist_sq(
                    px, py, pz,
                    verts[i0, 0], verts[i0, 1], verts[i0, 2],
                    verts[i1, 0], verts[i1, 1], verts[i1, 2],
                    verts[i2, 0], verts[i2, 1], verts[i2, 2])
                if dd < best:
                    best = dd
        else:
            lc = left[node]
            rc = right[node]
            dl = _bbox_dist_sq(px, py, pz,
                               nmin[lc, 0], nmin[lc, 1], nmin[lc, 2],
                               nmax[lc, 0], nmax[lc, 1], nmax[lc, 2])
            dr = _bbox_dist_sq(px, py, pz,
                               nmin[rc, 0], nmin[rc, 1], nmin[rc, 2],
                               nmax[rc, 0], nmax[rc, 1], nmax[rc, 2])
            if dl <= dr:
                stack[sp] = rc
                sp += 1
                stack[sp] = lc
                sp += 1
            else:
                stack[sp] = lc
                sp += 1
                stack[sp] = rc
                sp += 1
    return np.sqrt(best)


@njit(cache=True, parallel=True)
def closest_dist_batch(verts, faces, nmin, nmax, left, right, start, count,
                       prim, points, out):
    for i in prange(points.shape[0]):
        out[i] = closest_dist(verts, faces, nmin, nmax, left, right, start,
                              count, prim,
                              points[i, 0], points[i, 1], points[i, 2])


@njit(cache=True, parallel=True)
def linear_closest_batch(verts, faces, points, out):
    """Exact point-to-surface distance by scanning every face."""
    for i in prange(points.shape[0]):
        px = points[i, 0]
        py = points[i, 1]
        pz = points[i, 2]
        best = np.inf
        for j in range(faces.shape[0]):
            i0 = faces[j, 0]
            i1 = faces[j, 1]
            i2 = faces[j, 2]
            d = _point_tri_dist_sq(
                px, py, pz,
                verts[i0, 0], verts[i0, 1], verts[i0, 2],
                verts[i1, 0], verts[i1, 1], verts[i1, 2],
                verts[i2, 0], verts[i2, 1], verts[i2, 2])
            if d < best:
                best = d
        out[i] = np.sqrt(best)


@njit(cache=True, inline="always")
def _vec_angles(x, y, z):
    """Cartesian unit vector -> (azimuth in [0, 2pi), polar in [0, pi])."""
    zz = z
    if zz > 1.0:
        zz = 1.0
    elif zz < -1.0:
        zz = -1.0
    theta1 = np.arccos(zz)
    theta0 = np.arctan2(y, x)
    if theta0 < 0.0:
        theta0 += 6.283185307179586
    return theta0, theta1


@njit(cache=True, parallel=True)
def collect_march_batch(verts, faces, nmin, nmax, left, right, start, count,
                        prim, qs, dirs, perp1, perp2, s_p, step, inside_test,
                        salt, out_pos, out_ang, out_t, out_miss, out_kind,
                        out_n):
    """Surface-ray marching for the "ours" sampling strategy.

    Per ray m (origin qs[m] on the surface, direction dirs[m]):
      - reject in full when the ray marches into the mesh (odd-even test);
      - otherwise emit back-pointing samples (p_k, -theta; k*step) while
        k*step stays short of the first crossing with another face;
      - when the forward ray never hits the mesh, also emit forward-miss
        samples and, per perpendicular direction that misses, a miss sample.

    Each ray owns the slot range [m*4*s_p, (m+1)*4*s_p) in the out arrays;
    out_kind is 0 = back target, 1 = forward miss, 2 = perpendicular miss.
    """
    cap = 4 * s_p
    for m in prange(qs.shape[0]):
        base = m * cap
        n = 0
        ox = qs[m, 0]
        oy = qs[m, 1]
        oz = qs[m, 2]
        dx = dirs[m, 0]
        dy = dirs[m, 1]
        dz = dirs[m, 2]
        f_blk, t_blk, _, _ = bvh_intersect(
            verts, faces, nmin, nmax, left, right, start, count, prim,
            ox, oy, oz, dx, dy, dz, SELF_EPS, np.inf)
        if inside_test:
            probe = step if step < t_blk else t_blk
            probe *= 0.5
            if parity_inside(verts, faces, nmin, nmax, left, right, start,
                             count, prim,
                             ox + probe * dx, oy + probe * dy, oz + probe * dz,
                             salt):
                out_n[m] = 0
                continue
        fwd_miss = f_blk < 0
        b0, b1 = _vec_angles(-dx, -dy, -dz)
        f0, f1 = _vec_angles(dx, dy, dz)
        for k in range(1, s_p + 1):
            tk = k * step
            if tk >= t_blk:
                break
            px = ox + tk * dx
            py = oy + tk * dy
            pz = oz + tk * dz
            out_pos[base + n, 0] = px
            out_pos[base + n, 1] = py
            out_pos[base + n, 2] = pz
            out_ang[base + n, 0] = b0
            out_ang[base + n, 1] = b1
            out_t[base + n] = tk
            out_miss[base + n] = 0
            out_kind[base + n] = 0
            n += 1
            if fwd_miss:
                out_pos[base + n, 0] = px
                out_pos[base + n, 1] = py
                out_pos[base + n, 2] = pz
                out_ang[base + n, 0] = f0
                out_ang[base + n, 1] = f1
                out_t[base + n] = np.inf
                out_miss[base + n] = 1
                out_kind[base + n] = 1
                n += 1
                for w in range(2):
                    if w == 0:
                        wx = perp1[m, 0]
                        wy = perp1[m, 1]
                        wz = perp1[m, 2]
                    else:
                        wx = perp2[m, 0]
                        wy = perp2[m, 1]
                        wz = perp2[m, 2]
                    fp, _, _, _ = bvh_intersect(
                        verts, faces, nmin, nmax, left, right, start, count,
                        prim, px, py, pz, wx, wy, wz, 0.0, np.inf)
                    if fp < 0:
                        w0, w1 = _vec_angles(wx, wy, wz)
                        out_pos[base + n, 0] = px
                        out_pos[base + n, 1] = py
                        out_pos[base + n, 2] = pz
                        out_ang[base + n, 0] = w0
                        out_ang[base + n, 1] = w1
                        out_t[base + n] = np.inf
                        out_miss[base + n] = 1
                        out_kind[base + n] = 2
                        n += 1
        out_n[m] = n
