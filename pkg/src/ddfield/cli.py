"""Command-line pipeline: sample, train, render, reconstruct, eval, bench,
plus a chaining `pipeline` subcommand and a `make-mesh` helper.

Every run writes a `<command>.manifest.txt` (resolved configuration plus
library versions, no timestamps) next to its outputs, so an artifact can be
reproduced byte-for-byte from its manifest with `--threads 1`.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataError, NumericError

_thread_limiter = None  # keeps the BLAS thread cap alive for the process


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors on exit code 1 (not argparse's 2)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _versions() -> dict:
    import matplotlib
    import numba
    import scipy
    import skimage
    return {
        "ddfield": __version__,
        "numpy": np.__version__,
        "numba": numba.__version__,
        "scipy": scipy.__version__,
        "scikit-image": skimage.__version__,
        "matplotlib": matplotlib.__version__,
    }


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(_fmt(v) for v in value)
    return str(value)


def write_manifest(out_dir: Path, command: str, params: dict) -> Path:
    path = out_dir / f"{command}.manifest.txt"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"command = {command}\n")
        for key in sorted(params):
            fh.write(f"{key} = {_fmt(params[key])}\n")
        for key, value in sorted(_versions().items()):
            fh.write(f"version.{key} = {value}\n")
    return path


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_normalized(path):
    from .mesh import load_mesh, normalize
    return normalize(load_mesh(path))


def _make_backend(args):
    from .field import BruteForceField, NeuralField, OracleField
    kind = args.backend
    if kind == "neural":
        if not getattr(args, "model", None):
            raise DataError("backend=neural needs --model")
        return NeuralField.from_checkpoint(args.model)
    if not getattr(args, "mesh", None):
        raise DataError(f"backend={kind} needs --mesh")
    mesh = _load_normalized(args.mesh)
    if kind == "oracle":
        return OracleField(mesh)
    if kind == "brute":
        return BruteForceField(mesh)
    raise DataError(f"unknown backend {kind!r}")


def _camera(args):
    from .render import Camera
    up = (0.0, 0.0, 1.0) if args.z_up else (0.0, 1.0, 0.0)
    return Camera(position=np.asarray(args.cam_pos),
                  look_at=np.asarray(args.look_at), up=up,
                  vfov=np.radians(args.fov),
                  width=args.width, height=args.height)


def cmd_sample(args) -> int:
    from .sampler import SamplerConfig, build_dataset, write_dataset
    out = _out_dir(args)
    mesh = _load_normalized(args.mesh)
    config = SamplerConfig(s_fc=args.sfc, s_dr=args.sdr, s_p=args.sp,
                           step=args.step, strategy=args.strategy,
                           seed=args.seed, n_random=args.n, film=args.film,
                           inside_test=not args.no_inside_test)
    ds, stats = build_dataset(mesh, config)
    path = out / "dataset.ddf"
    write_dataset(ds, path)
    print(f"wrote {path} ({len(ds)} records)")
    print(f"  finite targets:      {stats['finite']}")
    print(f"  forward misses:      {stats['forward_miss']}")
    print(f"  perpendicular miss:  {stats['perpendicular_miss']}")
    write_manifest(out, "sample", {
        "mesh": args.mesh, "strategy": args.strategy, "sfc": args.sfc,
        "sdr": args.sdr, "sp": args.sp,
        "step": stats.get("step", args.step), "seed": args.seed,
        "n": args.n, "film": args.film,
        "inside_test": not args.no_inside_test, "records": len(ds),
        "threads": args.threads or 0,
    })
    return 0


def cmd_train(args) -> int:
    from . import report
    from .neural import TrainConfig, save_model, train
    from .sampler import read_dataset
    out = _out_dir(args)
    ds = read_dataset(args.dataset)
    config = TrainConfig(delta=args.delta, lr=args.lr, batch_size=args.batch,
                         iterations=args.iters, dropout=args.dropout,
                         hidden_layers=args.layers, hidden_width=args.width,
                         seed=args.seed, log_every=args.log_every)
    model, history = train(ds, config)
    ckpt = out / "model.ddfn"
    save_model(model, args.delta, ckpt)
    report.write_loss(history, out / "loss.csv", out / "loss.png")
    print(f"wrote {ckpt} (final loss {history[-1, 1]:.6f})")
    write_manifest(out, "train", {
        "dataset": args.dataset, "delta": args.delta, "lr": args.lr,
        "batch": args.batch, "iterations": args.iters,
        "dropout": args.dropout, "layers": args.layers, "width": args.width,
        "seed": args.seed, "threads": args.threads or 0,
    })
    return 0


def cmd_render(args) -> int:
    from .render import RenderConfig, render, write_pfm, write_ppm
    out = _out_dir(args)
    backend = _make_backend(args)
    camera = _camera(args)
    config = RenderConfig(mode=args.mode, spp=args.spp, bounces=args.bounces,
                          seed=args.seed)
    fb = render(backend, camera, config)
    if args.mode == "depth":
        path = out / "image.pfm"
        write_pfm(fb, path)
    else:
        path = out / "image.ppm"
        write_ppm(fb, path)
    print(f"wrote {path}")
    write_manifest(out, "render", {
        "backend": args.backend, "mesh": args.mesh or "",
        "model": args.model or "", "mode": args.mode,
        "width": args.width, "height": args.height, "spp": args.spp,
        "bounces": args.bounces, "fov": args.fov,
        "cam_pos": args.cam_pos, "look_at": args.look_at,
        "z_up": args.z_up, "seed": args.seed, "threads": args.threads or 0,
    })
    return 0


def cmd_reconstruct(args) -> int:
    from .mesh import save_obj
    from .recon import default_iso, marching_cubes, udf_grid
    out = _out_dir(args)
    backend = _make_backend(args)
    grid = udf_grid(backend, resolution=args.resolution, n_dirs=args.n_dirs)
    iso = args.iso if args.iso is not None else default_iso(grid)
    mesh = marching_cubes(grid, iso)
    path = out / "recon.obj"
    save_obj(mesh, path)
    print(f"wrote {path} ({mesh.n_vertices} vertices, {mesh.n_faces} faces, "
          f"iso {iso:.4f})")
    write_manifest(out, "reconstruct", {
        "backend": args.backend, "mesh": args.mesh or "",
        "model": args.model or "", "resolution": args.resolution,
        "n_dirs": args.n_dirs, "iso": iso, "threads": args.threads or 0,
    })
    return 0


def cmd_eval(args) -> int:
    from . import report
    from .mesh import load_mesh
    from .metrics import (CHAMFER_REPORT_SCALE, chamfer, f_score,
                          sample_surface, sided_profile)
    out = _out_dir(args)
    pred = load_mesh(args.pred)
    gt = _load_normalized(args.gt) if not args.raw_gt else load_mesh(args.gt)
    if pred.n_faces == 0:
        raise DataError(f"{args.pred}: empty reconstruction")
    p1 = sample_surface(pred, args.n_points, seed=args.seed)
    p2 = sample_surface(gt, args.n_points, seed=args.seed + 1)
    cd = chamfer(p1, p2)
    fs = f_score(p1, p2, args.tau)
    prof = sided_profile(p1, p2)
    params = (f"n_points={args.n_points} seed={args.seed} tau={args.tau} "
              f"squared=True")
    entries = [
        ("chamfer_x1e3", cd * CHAMFER_REPORT_SCALE, params),
        ("f_score", fs, params),
        ("sided_median", float(np.median(prof)), params),
        ("sided_p90", float(np.percentile(prof, 90)), params),
    ]
    report.write_metrics(entries, out / "metrics.csv", out / "metrics.png")
    for name, value, _ in entries:
        print(f"{name} = {value:.6f}")
    write_manifest(out, "eval", {
        "pred": args.pred, "gt": args.gt, "n_points": args.n_points,
        "tau": args.tau, "seed": args.seed, "raw_gt": args.raw_gt,
        "threads": args.threads or 0,
    })
    return 0


def cmd_bench(args) -> int:
    from . import report
    from .field import NeuralField, OracleField
    from .render import RenderConfig, bench
    out = _out_dir(args)
    backends = {}
    for name in args.backends.split(","):
        name = name.strip()
        if name == "oracle":
            if not args.mesh:
                raise DataError("bench backend oracle needs --mesh")
            backends[name] = OracleField(_load_normalized(args.mesh))
        elif name == "neural":
            if not args.model:
                raise DataError("bench backend neural needs --model")
            backends[name] = NeuralField.from_checkpoint(args.model)
        else:
            raise DataError(f"unknown bench backend {name!r}")
    camera = _camera(args)
    config = RenderConfig(mode=args.mode, seed=args.seed)
    rows = bench(backends, camera, config, args.frames)
    report.write_timing(rows, out / "timing.csv", out / "timing.png")
    for name in backends:
        times = [r[2] for r in rows if r[0] == name]
        print(f"{name}: first (warm-up) {times[0]:.1f} ms, "
              f"steady median {np.median(times[1:]):.1f} ms")
    write_manifest(out, "bench", {
        "backends": args.backends, "mesh": args.mesh or "",
        "model": args.model or "", "frames": args.frames, "mode": args.mode,
        "width": args.width, "height": args.height,
        "threads": args.threads or 0,
    })
    return 0


def cmd_pipeline(args) -> int:
    """sample -> train -> render -> reconstruct -> eval in one output tree."""
    from . import report
    from .field import NeuralField, OracleField
    from .mesh import save_obj
    from .metrics import (CHAMFER_REPORT_SCALE, chamfer, f_score,
                          sample_surface)
    from .neural import TrainConfig, save_model, train
    from .recon import default_iso, marching_cubes, udf_grid
    from .render import Camera, RenderConfig, render_depth, write_pfm
    from .sampler import SamplerConfig, build_dataset, write_dataset

    out = _out_dir(args)
    mesh = _load_normalized(args.mesh)

    config = SamplerConfig(s_fc=args.sfc, s_dr=args.sdr, s_p=args.sp,
                           strategy=args.strategy, seed=args.seed)
    ds, stats = build_dataset(mesh, config)
    write_dataset(ds, out / "dataset.ddf")
    print(f"dataset: {len(ds)} records ({stats['finite']} finite)")

    tconf = TrainConfig(delta=args.delta, lr=args.lr, batch_size=args.batch,
                        iterations=args.iters, seed=args.seed,
                        hidden_layers=args.layers, hidden_width=args.width,
                        log_every=0)
    model, history = train(ds, tconf)
    save_model(model, args.delta, out / "model.ddfn")
    report.write_loss(history, out / "loss.csv", out / "loss.png")
    print(f"train: final loss {history[-1, 1]:.6f}")

    backend = NeuralField(model, args.delta)
    camera = Camera(position=(0.0, 0.0, 2.5), look_at=(0.0, 0.0, 0.0),
                    width=64, height=64)
    fb = render_depth(backend, camera, RenderConfig(seed=args.seed))
    write_pfm(fb, out / "depth.pfm")

    grid = udf_grid(backend, resolution=args.resolution, n_dirs=args.n_dirs)
    recon = marching_cubes(grid, default_iso(grid))
    save_obj(recon, out / "recon.obj")
    print(f"reconstruct: {recon.n_faces} faces")

    if recon.n_faces == 0:
        raise NumericError("reconstruction is empty; cannot evaluate")
    p1 = sample_surface(recon, args.n_points, seed=args.seed)
    p2 = sample_surface(mesh, args.n_points, seed=args.seed + 1)
    cd = chamfer(p1, p2)
    fs = f_score(p1, p2, 0.01)
    params = f"n_points={args.n_points} seed={args.seed} tau=0.01 squared=True"
    report.write_metrics([
        ("chamfer_x1e3", cd * CHAMFER_REPORT_SCALE, params),
        ("f_score", fs, params),
    ], out / "metrics.csv", out / "metrics.png")
    print(f"eval: chamfer_x1e3 {cd * CHAMFER_REPORT_SCALE:.4f} f_score {fs:.4f}")

    write_manifest(out, "pipeline", {
        "mesh": args.mesh, "strategy": args.strategy, "sfc": args.sfc,
        "sdr": args.sdr, "sp": args.sp, "seed": args.seed,
        "delta": args.delta, "lr": args.lr, "batch": args.batch,
        "iterations": args.iters, "layers": args.layers, "width": args.width,
        "resolution": args.resolution, "n_dirs": args.n_dirs,
        "n_points": args.n_points, "threads": args.threads or 0,
    })
    return 0


def cmd_make_mesh(args) -> int:
    from . import meshes
    from .mesh import save_obj
    if args.shape == "sphere":
        mesh = meshes.icosphere(args.subdiv)
    elif args.shape == "cube":
        mesh = meshes.cube()
    elif args.shape == "blob":
        mesh = meshes.blob(args.subdiv, seed=args.seed)
    else:
        mesh = meshes.plane_quad()
    save_obj(mesh, args.out)
    print(f"wrote {args.out} ({mesh.n_vertices} vertices, {mesh.n_faces} faces)")
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out-dir", default="out", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None,
                   help="cap worker threads (DDF_THREADS as fallback); "
                        "1 guarantees bitwise determinism")


def _add_camera(p: argparse.ArgumentParser) -> None:
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--fov", type=float, default=60.0, help="vertical fov, degrees")
    p.add_argument("--cam-pos", type=float, nargs=3, default=(0.0, 0.0, 3.0))
    p.add_argument("--look-at", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    p.add_argument("--z-up", action="store_true",
                   help="use a z-up camera convention for visual comparison")


def _add_backend(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", choices=("oracle", "neural", "brute"),
                   default="oracle")
    p.add_argument("--mesh", help="OBJ path (oracle/brute backends)")
    p.add_argument("--model", help="DDFN checkpoint (neural backend)")


def build_parser() -> _Parser:
    parser = _Parser(prog="ddf", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="build a training dataset from a mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--strategy", choices=("ours", "random", "pov"),
                   default="ours")
    p.add_argument("--sfc", type=int, default=10)
    p.add_argument("--sdr", type=int, default=10)
    p.add_argument("--sp", type=int, default=10)
    p.add_argument("--step", type=float, default=None,
                   help="march step (default: bbox-diagonal based)")
    p.add_argument("--n", type=int, default=100_000,
                   help="record count for strategy=random")
    p.add_argument("--film", type=int, default=64,
                   help="film resolution for strategy=pov")
    p.add_argument("--no-inside-test", action="store_true",
                   help="skip the odd-even rejection (non-watertight meshes)")
    _add_common(p)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("train", help="train the field network on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--log-every", type=int, default=100)
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("render", help="render a field backend")
    _add_backend(p)
    p.add_argument("--mode", choices=("depth", "normal", "shaded", "path"),
                   default="depth")
    p.add_argument("--spp", type=int, default=16)
    p.add_argument("--bounces", type=int, default=3)
    _add_camera(p)
    _add_common(p)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("reconstruct", help="extract a mesh from a backend")
    _add_backend(p)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--n-dirs", type=int, default=512)
    p.add_argument("--iso", type=float, default=None)
    _add_common(p)
    p.set_defaults(fn=cmd_reconstruct)

    p = sub.add_parser("eval", help="compare a reconstruction to ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--n-points", type=int, default=30_000)
    p.add_argument("--tau", type=float, default=0.01)
    p.add_argument("--raw-gt", action="store_true",
                   help="do not normalize the ground-truth mesh")
    _add_common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="time renders per backend")
    p.add_argument("--backends", default="oracle,neural")
    p.add_argument("--mesh")
    p.add_argument("--model")
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--mode", choices=("depth", "normal", "shaded", "path"),
                   default="depth")
    _add_camera(p)
    _add_common(p)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("pipeline",
                       help="sample, train, render, reconstruct and eval")
    p.add_argument("--mesh", required=True)
    p.add_argument("--strategy", choices=("ours", "random", "pov"),
                   default="ours")
    p.add_argument("--sfc", type=int, default=10)
    p.add_argument("--sdr", type=int, default=10)
    p.add_argument("--sp", type=int, default=10)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--n-dirs", type=int, default=64)
    p.add_argument("--n-points", type=int, default=30_000)
    _add_common(p)
    p.set_defaults(fn=cmd_pipeline)

    p = sub.add_parser("make-mesh", help="write a procedural test mesh")
    p.add_argument("--shape", choices=("sphere", "cube", "blob", "plane"),
                   default="sphere")
    p.add_argument("--subdiv", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_make_mesh)

    return parser


def _apply_threads(args) -> None:
    global _thread_limiter
    threads = getattr(args, "threads", None)
    if threads is None:
        env = os.environ.get("DDF_THREADS")
        threads = int(env) if env else None
        if threads is not None:
            args.threads = threads
    if threads is None:
        return
    if threads < 1:
        raise DataError("--threads must be >= 1")
    import numba
    import threadpoolctl
    numba.set_num_threads(threads)
    _thread_limiter = threadpoolctl.threadpool_limits(threads)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_threads(args)
        return args.fn(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
