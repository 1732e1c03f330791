"""Command-line interface: ``probesurf <command> ...``."""
from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from . import io
from .decoder import ViewSwitches, decode_fused
from .geometry import TriMesh, chamfer, eikonal_band_fraction, marching_cubes, psnr_masked
from .gradcheck import gradcheck_main
from .render import RenderOptions, march_rays, render_image
from .schedule import load_schedule
from .synth import load_scene, make_dataset
from .train import TrainError, init_model, train


class CliError(Exception):
    def __init__(self, kind: str, msg: str):
        super().__init__(msg)
        self.kind = kind


def _load_ckpt(path):
    try:
        return io.load_checkpoint(path)
    except FileNotFoundError:
        raise CliError("io", f"checkpoint not found: {path}")


def _camera_for(args, meta):
    if args.dataset is None:
        raise CliError("usage", "--dataset is required to pick a camera")
    ds = io.load_dataset(args.dataset)
    for cam in ds.cameras:
        if cam.camera_id == args.camera:
            return cam
    raise CliError("usage", f"camera id {args.camera} not in {args.dataset}")


def render_options(meta: dict, args) -> RenderOptions:
    tau = args.tau if getattr(args, "tau", None) else meta.get("final_tau_world", 1000.0)
    sw = ViewSwitches(no_spatial=getattr(args, "no_spatial", False),
                      sh_order=getattr(args, "sh_order", None),
                      no_fresnel=getattr(args, "no_fresnel", False))
    return RenderOptions(tau=tau, switches=sw, max_samples=args.max_samples)


# ------------------------------------------------------------------ commands
def cmd_synth(args) -> int:
    scene = load_scene(args.scene)
    ds = make_dataset(scene, args.views, args.resolution, args.placement, args.distance,
                      args.fov, args.seed, n_points=args.points)
    root = io.save_dataset(ds, args.out)
    print(f"wrote {len(ds)} views to {root}")
    return 0


def cmd_train(args) -> int:
    ds = io.load_dataset(args.dataset)
    sched = load_schedule(args.schedule)
    log_fh = open(args.log, "w") if args.log else None

    def log(line):
        if log_fh:
            log_fh.write(line + "\n")
        if not args.quiet:
            print(line, flush=True)

    try:
        res = train(ds, sched, seed=args.seed, threads=args.threads, log=log,
                    max_samples=args.max_samples)
    finally:
        if log_fh:
            log_fh.close()
    last = sched.lods[-1]
    tau = last.tau_at(max(last.iterations - 1, 0)) / res.grid.voxel_size
    meta = {"seed": args.seed, "steps": res.steps, "lod_index": len(sched.lods) - 1,
            "final_tau_world": tau, "decode_eps": last.decode_eps,
            "schedule_path": str(args.schedule)}
    io.save_checkpoint(args.out, res.grid, res.mlp, meta)
    print(f"wrote checkpoint {args.out} after {res.steps} steps in {res.seconds:.1f}s")
    return 0


def cmd_render(args) -> int:
    grid, mlp, meta = _load_ckpt(args.checkpoint)
    cam = _camera_for(args, meta)
    if args.sh_order is not None and not 1 <= args.sh_order <= grid.order:
        raise CliError("usage", f"--sh-order must be in [1, {grid.order}]")
    rgb, alpha = render_image(grid, mlp, cam, render_options(meta, args))
    io.write_png(args.out, rgb)
    if args.alpha:
        io.write_png(args.alpha, alpha)
    print(f"wrote {args.out}")
    return 0


def cmd_mesh(args) -> int:
    grid, _, _ = _load_ckpt(args.checkpoint)
    mesh = marching_cubes(grid)
    if len(mesh) == 0:
        print("warning: no zero crossing, writing empty mesh", file=sys.stderr)
    if str(args.out).lower().endswith(".obj"):
        io.write_obj(args.out, mesh.vertices, mesh.faces)
    else:
        io.write_ply(args.out, mesh.vertices, mesh.faces)
    print(f"wrote {args.out} ({len(mesh.vertices)} vertices, {len(mesh)} faces)")
    return 0


def cmd_eval(args) -> int:
    grid, mlp, meta = _load_ckpt(args.checkpoint)
    ds = io.load_dataset(args.dataset)
    if args.image_divisor > 1:
        ds = ds.downsampled(args.image_divisor)
    opts = render_options(meta, args)
    psnrs = []
    for cam, img, mask in zip(ds.cameras, ds.images, ds.masks):
        if mask.any():
            rgb, _ = render_image(grid, mlp, cam, opts)
            # dataset images are 8-bit; compare at the same precision
            psnrs.append(psnr_masked(io.to_uint8(rgb) / 255.0, img, mask))
    metrics = {"psnr": float(np.mean(psnrs)) if psnrs else float("nan"),
               "psnr_min": float(np.min(psnrs)) if psnrs else float("nan"),
               "views": len(psnrs), "eikonal_band_fraction": eikonal_band_fraction(grid)}
    gt = None
    if args.gt_mesh:
        v, f = io.read_ply(args.gt_mesh)
        gt = TriMesh(v, f) if f is not None and len(f) else v
    elif ds.points_gt is not None:
        gt = ds.points_gt
    if gt is not None:
        mesh = marching_cubes(grid)
        if len(mesh) == 0:
            raise CliError("eval", "reconstruction has no surface")
        c = chamfer(mesh, gt, args.max_dist, args.samples, args.seed)
        metrics.update({f"chamfer_{k}": v for k, v in c.items()})
        metrics["chamfer_voxels"] = c["mean"] / 1000.0 / grid.voxel_size
    print(io.format_metrics(metrics))
    if args.json:
        io.write_metrics(args.json, metrics)
    return 0


def cmd_bench(args) -> int:
    grid, mlp, meta = _load_ckpt(args.checkpoint)
    cam = _camera_for(args, meta)
    opts = render_options(meta, args)
    o, d = cam.rays()
    t0 = time.perf_counter()
    smp = march_rays(grid, o, d, opts.max_samples)
    t_march = time.perf_counter() - t0
    pts = (o[smp.ray_index][:, None] + smp.t[..., None] * d[smp.ray_index][:, None])[smp.valid]
    views = -np.repeat(d[smp.ray_index][:, None], smp.k.shape[1], axis=1)[smp.valid]
    t0 = time.perf_counter()
    for a in range(0, len(pts), 65536):
        decode_fused(grid, mlp, pts[a:a + 65536], views[a:a + 65536], None, opts.switches)
    t_shade = time.perf_counter() - t0
    t0 = time.perf_counter()
    for _ in range(args.repeat):
        render_image(grid, mlp, cam, opts)
    t_render = (time.perf_counter() - t0) / args.repeat
    print(io.format_metrics({"pixels": cam.width * cam.height, "samples": int(smp.valid.sum()),
                             "march_ms": 1e3 * t_march, "shading_ms": 1e3 * t_shade,
                             "render_ms": 1e3 * t_render}))
    return 0


def cmd_gradcheck(args) -> int:
    return 0 if gradcheck_main(args.seed, args.tol) else 1


def cmd_init(args) -> int:
    ds = io.load_dataset(args.dataset)
    grid, mlp = init_model(ds, load_schedule(args.schedule), args.seed)
    io.save_checkpoint(args.out, grid, mlp, {"seed": args.seed, "steps": 0})
    print(f"wrote {args.out}")
    return 0


# ------------------------------------------------------------------ parser
class _Parser(argparse.ArgumentParser):
    """Usage errors become the same one-line ``error: kind: msg`` as other failures."""

    def error(self, message):
        self.exit(2, f"error: usage: {' '.join(message.split())}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="probesurf", description=(
        "Reconstruct an SDF surface with tri-plane features and SH light-field probes "
        "from posed, masked images."))
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for all randomized behavior")
    common.add_argument("--threads", type=int, default=1, help="worker threads for batched rendering")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    s = add("synth", help="render an analytic scene into a dataset")
    s.add_argument("scene", help="scene TOML")
    s.add_argument("out", help="output dataset directory")
    s.add_argument("--views", type=int, default=24)
    s.add_argument("--resolution", type=int, default=128)
    s.add_argument("--placement", choices=("sphere", "ring"), default="sphere")
    s.add_argument("--distance", type=float, default=3.0)
    s.add_argument("--fov", type=float, default=40.0)
    s.add_argument("--points", type=int, default=20000, help="ground-truth surface points")
    s.set_defaults(fn=cmd_synth)

    def add_render_flags(q):
        q.add_argument("--tau", type=float, default=None, help="override sharpness (1/world units)")
        q.add_argument("--max-samples", type=int, default=512)

    s = add("train", help="optimize a model on a dataset")
    s.add_argument("dataset")
    s.add_argument("schedule", help="schedule TOML")
    s.add_argument("-o", "--out", default="model.ckpt")
    s.add_argument("--log", default=None, help="write the per-step loss log here")
    s.add_argument("--quiet", action="store_true")
    s.add_argument("--max-samples", type=int, default=512)
    s.set_defaults(fn=cmd_train)

    s = add("init", help="write the initial checkpoint of a schedule")
    s.add_argument("dataset")
    s.add_argument("schedule")
    s.add_argument("-o", "--out", default="init.ckpt")
    s.set_defaults(fn=cmd_init)

    s = add("render", help="render one camera of a dataset")
    s.add_argument("checkpoint")
    s.add_argument("--dataset", required=True)
    s.add_argument("--camera", type=int, default=0)
    s.add_argument("-o", "--out", default="render.png")
    s.add_argument("--alpha", default=None, help="also write accumulated opacity")
    s.add_argument("--no-spatial", action="store_true", help="zero the spatial features")
    s.add_argument("--sh-order", type=int, default=None, help="truncate probes to order N")
    s.add_argument("--no-fresnel", action="store_true", help="zero the Fresnel inputs")
    add_render_flags(s)
    s.set_defaults(fn=cmd_render)

    s = add("mesh", help="extract the zero level set")
    s.add_argument("checkpoint")
    s.add_argument("-o", "--out", default="mesh.ply", help=".ply or .obj")
    s.set_defaults(fn=cmd_mesh)

    s = add("eval", help="PSNR on dataset views, chamfer against ground truth")
    s.add_argument("checkpoint")
    s.add_argument("dataset")
    s.add_argument("--gt-mesh", default=None, help="PLY mesh; defaults to the dataset's points")
    s.add_argument("--max-dist", type=float, default=None)
    s.add_argument("--samples", type=int, default=100_000)
    s.add_argument("--image-divisor", type=int, default=1)
    s.add_argument("--json", default=None, help="also write metrics as JSON")
    add_render_flags(s)
    s.set_defaults(fn=cmd_eval)

    s = add("bench", help="CPU timings for shading and full rendering")
    s.add_argument("checkpoint")
    s.add_argument("--dataset", required=True)
    s.add_argument("--camera", type=int, default=0)
    s.add_argument("--repeat", type=int, default=3)
    add_render_flags(s)
    s.set_defaults(fn=cmd_bench)

    s = add("gradcheck", help="finite-difference audit on a tiny scene")
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(fn=cmd_gradcheck)
    return p


_ERROR_KINDS = (
    (io.PoseError, "pose"),
    (io.DatasetError, "dataset"),
    (io.CheckpointError, "checkpoint"),
    (TrainError, "train"),
    (FileNotFoundError, "io"),
    (OSError, "io"),
    (ValueError, "value"),
    (IndexError, "value"),
)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.fn(args)
    except CliError as e:
        msg, kind = str(e), e.kind
    except Exception as e:  # noqa: BLE001 - every failure becomes one parseable line
        kind = next((k for cls, k in _ERROR_KINDS if isinstance(e, cls)), "internal")
        msg = str(e) or type(e).__name__
    print(f"error: {kind}: {' '.join(msg.split())}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
