"""Training-data generation: the surface-ray strategy plus uniform-random and
camera (point-of-view) baselines, and the binary dataset format.

Faces are independent work units with RNG streams derived from (seed, face
index), so a dataset is byte-identical regardless of worker count.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np

from . import _kernels as _k
from .errors import DataError
from .field import (Direction2, angles_to_vecs, dir_to_vec,
                    orthonormal_frames, vecs_to_angles)
from .mesh import Bvh, TriangleMesh, as_bvh, intersect_rays

DATASET_MAGIC = b"DDF1"
RECORD_DTYPE = np.dtype([
    ("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
    ("theta0", "<f8"), ("theta1", "<f8"),
    ("flags", "u1"), ("t", "<f8"),
])
FLAG_MISS = 0x01


@dataclass(frozen=True)
class FieldSample:
    """One supervision record: where, looking which way, and the distance
    seen (None for a miss)."""

    position: np.ndarray
    direction: Direction2
    target: float | None

    @property
    def miss(self) -> bool:
        return self.target is None


@dataclass
class SamplerConfig:
    s_fc: int = 10            # points per face
    s_dr: int = 10            # directions per face
    s_p: int = 10             # marching steps per ray
    step: float | None = None  # march step; default derived from the bbox diagonal
    strategy: str = "ours"    # ours | random | pov
    seed: int = 0
    n_random: int = 100_000   # record count for strategy=random
    film: int = 64            # square film resolution for strategy=pov
    fov: float = np.pi / 3.0  # vertical fov for the pov cameras
    inside_test: bool = True  # odd-even rejection of rays marching inside

    def __post_init__(self):
        if min(self.s_fc, self.s_dr, self.s_p) < 1:
            raise ValueError("sample counts must be >= 1")
        if self.step is not None and self.step <= 0:
            raise ValueError("step must be positive")
        if self.strategy not in ("ours", "random", "pov"):
            raise ValueError(f"unknown strategy {self.strategy!r}")


class Dataset:
    """Column store of field samples plus the generating bbox."""

    def __init__(self, positions, angles, target, miss, bbox):
        self.positions = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
        self.angles = np.ascontiguousarray(angles, dtype=np.float64).reshape(-1, 2)
        self.miss = np.ascontiguousarray(miss, dtype=bool).reshape(-1)
        # the stored t of a miss record is meaningless; canonicalize to 0
        target = np.asarray(target, dtype=np.float64).reshape(-1)
        self.target = np.where(self.miss, 0.0, target)
        self.bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
        n = len(self.positions)
        if not (len(self.angles) == len(self.target) == len(self.miss) == n):
            raise ValueError("dataset column lengths differ")

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> FieldSample:
        t = None if self.miss[i] else float(self.target[i])
        return FieldSample(self.positions[i].copy(),
                           Direction2(float(self.angles[i, 0]),
                                      float(self.angles[i, 1])), t)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def to_records(self) -> np.ndarray:
        rec = np.zeros(len(self), dtype=RECORD_DTYPE)
        rec["x"], rec["y"], rec["z"] = self.positions.T
        rec["theta0"], rec["theta1"] = self.angles.T
        rec["flags"] = np.where(self.miss, FLAG_MISS, 0).astype(np.uint8)
        rec["t"] = np.where(self.miss, 0.0, self.target)
        return rec

    @classmethod
    def from_records(cls, rec: np.ndarray, bbox) -> "Dataset":
        positions = np.stack([rec["x"], rec["y"], rec["z"]], axis=1)
        angles = np.stack([rec["theta0"], rec["theta1"]], axis=1)
        miss = (rec["flags"] & FLAG_MISS).astype(bool)
        return cls(positions, angles, rec["t"], miss, bbox)


def default_step(mesh: TriangleMesh, s_p: int) -> float:
    """March step so a ray probes about a tenth of the scene diagonal."""
    diag = float(np.linalg.norm(mesh.bbox[1] - mesh.bbox[0]))
    return 2.0 * diag / (s_p * 10.0)


def sample_face_points(mesh: TriangleMesh, face_index: int, s_fc: int,
                       rng: np.random.Generator) -> np.ndarray:
    """(s_fc, 3) uniform points on one face via folded barycentric draws.

    Draws a, b ~ U[0,1] and folds (a, b) -> (1-a, 1-b) when a + b > 1 so
    every point stays inside the triangle. A zero-area face is skipped with
    a warning (returns an empty array)."""
    i0, i1, i2 = mesh.faces[face_index]
    v = mesh.vertices
    area = 0.5 * np.linalg.norm(np.cross(v[i1] - v[i0], v[i2] - v[i0]))
    if area <= 0.0:
        warnings.warn(f"skipping zero-area face {face_index}")
        return np.empty((0, 3))
    ab = rng.random((s_fc, 2))
    fold = ab.sum(axis=1) > 1.0
    ab[fold] = 1.0 - ab[fold]
    a, b = ab[:, 0, None], ab[:, 1, None]
    return (1.0 - a - b) * v[i0] + a * v[i1] + b * v[i2]


def sample_directions(s_dr: int, rng: np.random.Generator) -> np.ndarray:
    """(s_dr, 2) direction angles, uniform in each angle.

    Draws a, b ~ U[0,1] and maps them to polar = a*pi, azimuth = 2*pi*b on
    the canonical (azimuth, polar) convention. Uniform in angle, not in solid
    angle, so directions pile up near the poles; that bias is intentional and
    matched by the tests."""
    ab = rng.random((s_dr, 2))
    angles = np.empty((s_dr, 2))
    angles[:, 0] = 2.0 * np.pi * ab[:, 1]
    angles[:, 1] = np.pi * ab[:, 0]
    return angles


def _run_march(bvh: Bvh, qs: np.ndarray, dir_vecs: np.ndarray, s_p: int,
               step: float, inside_test: bool, salt: int):
    """Run the marching kernel; returns compacted (pos, ang, t, miss, kind)."""
    m = len(qs)
    cap = 4 * s_p
    out_pos = np.empty((m * cap, 3))
    out_ang = np.empty((m * cap, 2))
    out_t = np.empty(m * cap)
    out_miss = np.empty(m * cap, dtype=np.uint8)
    out_kind = np.empty(m * cap, dtype=np.uint8)
    out_n = np.empty(m, dtype=np.int64)
    perp1, perp2 = orthonormal_frames(dir_vecs)
    _k.collect_march_batch(*bvh._args(),
                           np.ascontiguousarray(qs),
                           np.ascontiguousarray(dir_vecs),
                           perp1, perp2, s_p, step, inside_test,
                           np.uint64(salt), out_pos, out_ang, out_t, out_miss,
                           out_kind, out_n)
    keep = np.zeros(m * cap, dtype=bool)
    for i in range(m):
        keep[i * cap:i * cap + out_n[i]] = True
    return (out_pos[keep], out_ang[keep], out_t[keep],
            out_miss[keep].astype(bool), out_kind[keep], out_n)


def march_and_collect(geom: TriangleMesh | Bvh, q, theta: Direction2,
                      s_p: int, step: float, inside_test: bool = True,
                      salt: int = 0) -> list[FieldSample]:
    """Collect the samples of one surface ray (see the kernel for the rules)."""
    bvh = as_bvh(geom)
    q = np.asarray(q, dtype=np.float64).reshape(1, 3)
    d = dir_to_vec(theta).reshape(1, 3)
    pos, ang, t, miss, _, _ = _run_march(bvh, q, d, s_p, step, inside_test, salt)
    return [FieldSample(pos[i].copy(),
                        Direction2(float(ang[i, 0]), float(ang[i, 1])),
                        None if miss[i] else float(t[i]))
            for i in range(len(pos))]


def build_dataset(mesh: TriangleMesh, config: SamplerConfig,
                  bvh: Bvh | None = None):
    """Generate a dataset with the configured strategy.

    Returns (dataset, stats); stats counts records per category
    (finite / forward miss / perpendicular miss) plus ray bookkeeping.
    Deterministic for a given config.
    """
    if mesh.n_faces == 0:
        raise DataError("cannot sample an empty mesh")
    half = 0.5 * (mesh.bbox[1] - mesh.bbox[0])
    if half.max() > 1.0 + 1e-6:
        warnings.warn("mesh does not look normalized; sampling it anyway")
    bvh = bvh if bvh is not None else as_bvh(mesh)
    if config.strategy == "ours":
        return _build_ours(mesh, bvh, config)
    if config.strategy == "random":
        return _build_random(mesh, bvh, config)
    return _build_pov(mesh, bvh, config)


def _build_ours(mesh: TriangleMesh, bvh: Bvh, config: SamplerConfig):
    step = config.step if config.step is not None else default_step(mesh, config.s_p)
    areas = mesh.face_areas()
    qs_parts = []
    ang_parts = []
    for f in range(mesh.n_faces):
        if areas[f] <= 0.0:
            warnings.warn(f"skipping zero-area face {f}")
            continue
        rng = np.random.default_rng([config.seed, f])
        pts = sample_face_points(mesh, f, config.s_fc, rng)
        angs = sample_directions(config.s_dr, rng)
        qs_parts.append(np.repeat(pts, config.s_dr, axis=0))
        ang_parts.append(np.tile(angs, (config.s_fc, 1)))
    qs = np.concatenate(qs_parts, axis=0)
    dir_vecs = angles_to_vecs(np.concatenate(ang_parts, axis=0))
    pos, ang, t, miss, kind, out_n = _run_march(
        bvh, qs, dir_vecs, config.s_p, step, config.inside_test, config.seed)
    ds = Dataset(pos, ang, t, miss, mesh.bbox)
    stats = {
        "strategy": "ours",
        "rays": int(len(qs)),
        "rejected_rays": int(np.sum(out_n == 0)),
        "finite": int(np.sum(kind == 0)),
        "forward_miss": int(np.sum(kind == 1)),
        "perpendicular_miss": int(np.sum(kind == 2)),
        "step": step,
    }
    return ds, stats


def _build_random(mesh: TriangleMesh, bvh: Bvh, config: SamplerConfig):
    rng = np.random.default_rng([config.seed, 0x5EED])
    n = config.n_random
    positions = rng.uniform(mesh.bbox[0], mesh.bbox[1], size=(n, 3))
    angles = sample_directions(n, rng)
    face, t, _, _ = intersect_rays(bvh, positions, angles_to_vecs(angles))
    miss = face < 0
    ds = Dataset(positions, angles, np.where(miss, 0.0, t), miss, mesh.bbox)
    stats = {
        "strategy": "random",
        "rays": n,
        "finite": int(np.sum(~miss)),
        "forward_miss": int(np.sum(miss)),
        "perpendicular_miss": 0,
    }
    return ds, stats


def pov_cameras(radius: float = 2.5, n_azimuth: int = 10, n_polar: int = 5):
    """Camera centers ringing the object: uniform azimuth x polar spacing."""
    centers = []
    for j in range(n_polar):
        polar = np.pi * (j + 0.5) / n_polar
        for i in range(n_azimuth):
            az = 2.0 * np.pi * i / n_azimuth
            centers.append(radius * np.array([
                np.cos(az) * np.sin(polar),
                np.sin(az) * np.sin(polar),
                np.cos(polar)]))
    return centers


def _build_pov(mesh: TriangleMesh, bvh: Bvh, config: SamplerConfig):
    from .render import Camera, pixel_rays
    center = 0.5 * (mesh.bbox[0] + mesh.bbox[1])
    pos_parts, ang_parts, t_parts, miss_parts = [], [], [], []
    for c in pov_cameras():
        cam = Camera(position=c + center, look_at=center, up=(0.0, 0.0, 1.0),
                     vfov=config.fov, width=config.film, height=config.film)
        origins, dirs = pixel_rays(cam)
        face, t, _, _ = intersect_rays(bvh, origins, dirs)
        miss = face < 0
        pos_parts.append(origins)
        ang_parts.append(vecs_to_angles(dirs))
        t_parts.append(np.where(miss, 0.0, t))
        miss_parts.append(miss)
    ds = Dataset(np.concatenate(pos_parts), np.concatenate(ang_parts),
                 np.concatenate(t_parts), np.concatenate(miss_parts),
                 mesh.bbox)
    stats = {
        "strategy": "pov",
        "rays": len(ds),
        "cameras": 50,
        "finite": int(np.sum(~ds.miss)),
        "forward_miss": int(np.sum(ds.miss)),
        "perpendicular_miss": 0,
    }
    return ds, stats


def write_dataset(ds: Dataset, path) -> None:
    """Binary layout: magic 'DDF1', record count (u64), bbox (6 f64), then
    packed records (x y z theta0 theta1 f64, flags u8, t f64), little-endian."""
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<Q", len(ds)))
        fh.write(np.ascontiguousarray(ds.bbox, dtype="<f8").tobytes())
        fh.write(ds.to_records().tobytes())


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != DATASET_MAGIC:
        raise DataError(f"{path}: not a DDF1 dataset")
    if len(blob) < 60:
        raise DataError(f"{path}: truncated dataset header")
    (count,) = struct.unpack_from("<Q", blob, 4)
    bbox = np.frombuffer(blob, dtype="<f8", count=6, offset=12).reshape(2, 3)
    expect = 60 + count * RECORD_DTYPE.itemsize
    if len(blob) != expect:
        raise DataError(f"{path}: expected {expect} bytes for {count} records, "
                        f"got {len(blob)}")
    rec = np.frombuffer(blob, dtype=RECORD_DTYPE, count=count, offset=60)
    return Dataset.from_records(rec, bbox)


def replay_max_error(ds: Dataset, backend) -> float:
    """Largest |oracle - target| over the finite-target records (0 if none)."""
    finite = ~ds.miss
    if not finite.any():
        return 0.0
    t, hit = backend.query_batch(ds.positions[finite],
                                 angles_to_vecs(ds.angles[finite]))
    err = np.where(hit, np.abs(t - ds.target[finite]), np.inf)
    return float(err.max())
