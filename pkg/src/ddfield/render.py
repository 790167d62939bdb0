"""Camera + framebuffer rendering over any field backend, plus the
DDF-vs-BVH timing harness.

Depth images hold raw field values (misses stay non-finite in the buffer and
write out as 0 = black). RGB modes write gamma-2.2 binary PPM; depth writes
32-bit float PFM.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError
from .field import OrientedPoint, orthonormal_frames, vec_to_dir

DEFAULT_LIGHT = np.array([1.0, 1.0, 1.0]) / np.sqrt(3.0)


@dataclass
class Camera:
    """Pinhole camera; right-handed with a y-up default."""

    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray = (0.0, 1.0, 0.0)
    vfov: float = np.pi / 3.0
    width: int = 256
    height: int = 256

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.look_at = np.asarray(self.look_at, dtype=np.float64)
        self.up = np.asarray(self.up, dtype=np.float64)
        if not 0.0 < self.vfov < np.pi:
            raise ValueError("vfov must be in (0, pi)")
        if self.width < 1 or self.height < 1:
            raise ValueError("film dimensions must be >= 1")
        fwd = self.look_at - self.position
        norm = np.linalg.norm(fwd)
        if norm == 0.0:
            raise ValueError("camera position equals look-at target")
        self.forward = fwd / norm
        right = np.cross(self.forward, self.up)
        rnorm = np.linalg.norm(right)
        if rnorm < 1e-12:
            raise ValueError("up vector is parallel to the view direction")
        self.right = right / rnorm
        self.up_ortho = np.cross(self.right, self.forward)


def pixel_rays(camera: Camera, offsets: np.ndarray | None = None):
    """Rays through every pixel, row-major (index = py * width + px).

    `offsets` is an optional (P,2) array of in-pixel positions in [0,1)^2;
    the default is the pixel center."""
    w, h = camera.width, camera.height
    px = np.tile(np.arange(w), h).astype(np.float64)
    py = np.repeat(np.arange(h), w).astype(np.float64)
    if offsets is None:
        ox = oy = 0.5
    else:
        ox, oy = offsets[:, 0], offsets[:, 1]
    tan_half = np.tan(camera.vfov / 2.0)
    aspect = w / h
    sx = (2.0 * (px + ox) / w - 1.0) * tan_half * aspect
    sy = (1.0 - 2.0 * (py + oy) / h) * tan_half
    dirs = (camera.forward[None, :]
            + sx[:, None] * camera.right[None, :]
            + sy[:, None] * camera.up_ortho[None, :])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.position, dirs.shape).copy()
    return origins, dirs


def primary_ray(camera: Camera, px: int, py: int,
                jitter: tuple[float, float] = (0.5, 0.5)) -> OrientedPoint:
    """The oriented point of one pixel's camera ray."""
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise ValueError("pixel outside the film")
    tan_half = np.tan(camera.vfov / 2.0)
    aspect = camera.width / camera.height
    sx = (2.0 * (px + jitter[0]) / camera.width - 1.0) * tan_half * aspect
    sy = (1.0 - 2.0 * (py + jitter[1]) / camera.height) * tan_half
    d = camera.forward + sx * camera.right + sy * camera.up_ortho
    d /= np.linalg.norm(d)
    return OrientedPoint(camera.position.copy(), vec_to_dir(d))


@dataclass
class Framebuffer:
    """Scalar (H,W) or RGB (H,W,3) image with linear float values."""

    width: int
    height: int
    data: np.ndarray

    def __post_init__(self):
        shape = self.data.shape
        if shape[:2] != (self.height, self.width):
            raise ValueError("framebuffer shape does not match the film")


@dataclass
class RenderConfig:
    mode: str = "depth"            # depth | normal | shaded | path
    spp: int = 16                  # samples per pixel (path mode)
    bounces: int = 3
    background: tuple = (0.0, 0.0, 0.0)
    light_dir: np.ndarray = field(default_factory=lambda: DEFAULT_LIGHT.copy())
    albedo: float = 0.7
    env_radiance: float = 1.0      # constant environment for path / ambient shading
    ambient: bool = False          # shaded mode: flat environment term instead of a sun
    seed: int = 0

    def __post_init__(self):
        if self.spp < 1:
            raise ValueError("spp must be >= 1")
        if self.bounces < 0:
            raise ValueError("bounces must be >= 0")
        l = np.asarray(self.light_dir, dtype=np.float64)
        self.light_dir = l / np.linalg.norm(l)


def _hit_normals(backend, origins, dirs, t, hit):
    """Normals for the hit subset; enforces the n . dir < 0 sign rule."""
    normals = np.zeros((len(origins), 3))
    if hit.any():
        n, valid = backend.normal_batch(origins[hit], dirs[hit],
                                        t_hit=t[hit])
        bad = ~valid
        if bad.any():
            # degenerate gradients: fall back to facing the ray
            n[bad] = -dirs[hit][bad]
        dots = np.einsum("ij,ij->i", n, dirs[hit])
        if not (dots < 0.0).all():
            raise NumericError("normal sign rule violated: n . dir >= 0")
        normals[hit] = n
    return normals


def render_depth(backend, camera: Camera,
                 config: RenderConfig | None = None) -> Framebuffer:
    """Field values per pixel; misses are non-finite in the buffer."""
    origins, dirs = pixel_rays(camera)
    t, hit = backend.trace_batch(origins, dirs)
    data = np.where(hit, t, np.inf).reshape(camera.height, camera.width)
    return Framebuffer(camera.width, camera.height, data)


def render_normal(backend, camera: Camera,
                  config: RenderConfig | None = None) -> Framebuffer:
    """Normals mapped (n+1)/2 into RGB; misses take the background color."""
    config = config or RenderConfig(mode="normal")
    origins, dirs = pixel_rays(camera)
    t, hit = backend.trace_batch(origins, dirs)
    normals = _hit_normals(backend, origins, dirs, t, hit)
    rgb = np.empty((len(dirs), 3))
    rgb[:] = np.asarray(config.background)
    rgb[hit] = 0.5 * (normals[hit] + 1.0)
    return Framebuffer(camera.width, camera.height,
                       rgb.reshape(camera.height, camera.width, 3))


def render_shaded(backend, camera: Camera,
                  config: RenderConfig | None = None) -> Framebuffer:
    """Lambertian shading under a directional light (or a flat environment
    term with config.ambient)."""
    config = config or RenderConfig(mode="shaded")
    origins, dirs = pixel_rays(camera)
    t, hit = backend.trace_batch(origins, dirs)
    normals = _hit_normals(backend, origins, dirs, t, hit)
    rgb = np.empty((len(dirs), 3))
    rgb[:] = np.asarray(config.background)
    if config.ambient:
        shade = np.full(int(hit.sum()), config.albedo * config.env_radiance)
    else:
        cosine = normals[hit] @ config.light_dir
        shade = config.albedo * np.maximum(cosine, 0.0)
    rgb[hit] = shade[:, None]
    return Framebuffer(camera.width, camera.height,
                       rgb.reshape(camera.height, camera.width, 3))


def _cosine_dirs(normals: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Cosine-weighted hemisphere directions about each normal."""
    r = np.sqrt(u[:, 0])
    phi = 2.0 * np.pi * u[:, 1]
    local = np.stack([r * np.cos(phi), r * np.sin(phi),
                      np.sqrt(np.maximum(0.0, 1.0 - u[:, 0]))], axis=1)
    t1, t2 = orthonormal_frames(normals)
    return (local[:, 0, None] * t1 + local[:, 1, None] * t2
            + local[:, 2, None] * normals)


def render_path(backend, camera: Camera,
                config: RenderConfig | None = None) -> Framebuffer:
    """Monte Carlo path trace with a fixed diffuse BRDF.

    Cosine-weighted bounces, constant environment radiance on escape, dark
    termination after the bounce budget. Deterministic for a seed: random
    draws are consumed in a fixed order independent of which rays are alive.
    """
    config = config or RenderConfig(mode="path")
    if config.bounces < 1:
        raise ValueError("path mode needs bounces >= 1")
    rng = np.random.default_rng([config.seed, 0x9A7])
    n_pix = camera.width * camera.height
    accum = np.zeros(n_pix)
    for _ in range(config.spp):
        jitter = rng.random((n_pix, 2))
        origins, dirs = pixel_rays(camera, offsets=jitter)
        radiance = np.zeros(n_pix)
        throughput = np.ones(n_pix)
        t, hit = backend.trace_batch(origins, dirs)
        radiance[~hit] = config.env_radiance
        alive = hit.copy()
        pos = origins
        for _bounce in range(config.bounces):
            u = rng.random((n_pix, 2))
            if not alive.any():
                continue
            idx = np.nonzero(alive)[0]
            normals = _hit_normals(backend, pos[idx], dirs[idx], t[idx],
                                   np.ones(len(idx), dtype=bool))
            hit_pts = (pos[idx] + t[idx, None] * dirs[idx]
                       + 1e-6 * normals)
            throughput[idx] *= config.albedo
            new_dirs = _cosine_dirs(normals, u[idx])
            t_new, hit_new = backend.trace_batch(hit_pts, new_dirs)
            escaped = idx[~hit_new]
            radiance[escaped] += throughput[escaped] * config.env_radiance
            alive[escaped] = False
            cont = idx[hit_new]
            pos[cont] = hit_pts[hit_new]
            dirs[cont] = new_dirs[hit_new]
            t[cont] = t_new[hit_new]
            alive_next = np.zeros(n_pix, dtype=bool)
            alive_next[cont] = True
            alive = alive_next
        accum += radiance
    value = accum / config.spp
    rgb = np.repeat(value[:, None], 3, axis=1)
    return Framebuffer(camera.width, camera.height,
                       rgb.reshape(camera.height, camera.width, 3))


_MODES = {
    "depth": render_depth,
    "normal": render_normal,
    "shaded": render_shaded,
    "path": render_path,
}


def render(backend, camera: Camera, config: RenderConfig) -> Framebuffer:
    try:
        fn = _MODES[config.mode]
    except KeyError:
        raise ValueError(f"unknown render mode {config.mode!r}") from None
    return fn(backend, camera, config)


def bench(backends: dict, camera: Camera, config: RenderConfig,
          frames: int) -> list[tuple[str, int, float, int]]:
    """Wall-clock per frame per backend; the first frame is flagged warm-up.

    Returns rows (backend, frame, milliseconds, warmup)."""
    if frames < 2:
        raise ValueError("need frames >= 2 to separate warm-up")
    rows = []
    for name, backend in backends.items():
        for i in range(frames):
            t0 = time.perf_counter()
            render(backend, camera, config)
            ms = (time.perf_counter() - t0) * 1e3
            rows.append((name, i, ms, 1 if i == 0 else 0))
    return rows


def write_ppm(fb: Framebuffer, path, gamma: float = 2.2) -> None:
    """Binary P6, 8-bit, gamma-encoded."""
    data = fb.data
    if data.ndim == 2:
        data = np.repeat(data[:, :, None], 3, axis=2)
    data = np.where(np.isfinite(data), data, 0.0)
    encoded = np.clip(data, 0.0, 1.0) ** (1.0 / gamma)
    u8 = (encoded * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{fb.width} {fb.height}\n255\n".encode("ascii"))
        fh.write(u8.tobytes())


def write_pfm(fb: Framebuffer, path) -> None:
    """Grayscale little-endian PFM; misses (non-finite) write as 0."""
    if fb.data.ndim != 2:
        raise ValueError("PFM output is for scalar framebuffers")
    data = np.where(np.isfinite(fb.data), fb.data, 0.0).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{fb.width} {fb.height}\n-1.0\n".encode("ascii"))
        fh.write(data[::-1].tobytes())  # PFM rows run bottom to top
