"""Command-line entry points: gen-scene, train, render, bench, serve."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data_io import (
    generate_synthetic_scene,
    load_gaussian_checkpoint,
    load_trajectory,
    save_gaussian_checkpoint,
    save_image,
)
from .engine_api import init_inference, validate_config
from .gaussian_core import GaussianModel
from .memory_tiers import TransferConfig
from .metrics import MetricsLog
from .parallel_engine import ParallelConfig
from .render_runtime import SessionConfig, ViewerServer, bench, camera_from_pose, run_session
from .scene_manager import partition_scene
from .train_runtime import TrainConfig, train_dynamic_loading_gs, train_parallel_gs, train_sequential_gs

log = logging.getLogger(__name__)


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--metrics", type=Path, default=None, help="JSON-lines metrics log path")


def cmd_gen_scene(args) -> int:
    scene = generate_synthetic_scene(
        args.seed, extent=args.extent, n_prims=args.prims,
        n_cameras=args.cameras, image_size=args.image_size,
    )
    args.out.parent.mkdir(parents=True, exist_ok=True)
    grid = partition_scene(scene.bbox, args.grid, args.grid)
    save_gaussian_checkpoint(scene.model, args.out, grid=grid)
    print(f"wrote {args.out} ({scene.model.count} primitives, {args.grid}x{args.grid} grid)")
    return 0


def cmd_train(args) -> int:
    model, grid = load_gaussian_checkpoint(args.scene)
    scene = generate_synthetic_scene(
        args.seed, n_prims=model.count, n_cameras=args.cameras, image_size=args.image_size
    )
    cameras, gts = scene.cameras, scene.gt_images
    cfg = TrainConfig(steps=args.steps, seed=args.seed,
                      densify_interval=args.densify_interval,
                      cell_steps=args.cell_steps, epochs=args.epochs)
    metrics = MetricsLog(args.metrics)
    if args.budget_bytes:
        if grid is None:
            print("error: dynamic-loading training needs a checkpoint with a scene grid",
                  file=sys.stderr)
            return 2
        model, info = train_dynamic_loading_gs(model, cameras, gts, grid,
                                               args.budget_bytes, cfg, metrics)
        print(json.dumps({k: info[k] for k in ("peak_resident_bytes", "budget_bytes")}))
    elif args.dp > 1:
        replicas, curve = train_parallel_gs(model, cameras, gts,
                                            ParallelConfig(args.dp, 1, "none"), cfg, metrics)
        model = replicas[0]
        print(f"final loss {curve[-1]:.6g}")
    else:
        model, curve = train_sequential_gs(model, cameras, gts, cfg, metrics)
        print(f"final loss {curve[-1]:.6g}")
    if args.out:
        save_gaussian_checkpoint(model, args.out, grid=grid)
        print(f"wrote {args.out}")
    return 0


def _load_engine(args):
    model, grid = load_gaussian_checkpoint(args.scene)
    config = validate_config(Path(args.config).read_text() if args.config else "")
    return init_inference(model, None, config), model, grid


def cmd_render(args) -> int:
    engine, _, _ = _load_engine(args)
    traj = load_trajectory(args.trajectory)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    metrics = MetricsLog(args.metrics)
    for i in range(len(traj)):
        camera = camera_from_pose(traj.positions[i], traj.quaternions[i], args.fov,
                                  args.image_size, args.image_size)
        image, stats = engine.render(camera)
        save_image(np.asarray(image), args.out_dir / f"frame_{i:05d}.png")
        metrics.append({"kind": "frame", "index": i, **stats})
    print(f"rendered {len(traj)} frames to {args.out_dir}")
    return 0


def cmd_bench(args) -> int:
    model, grid = load_gaussian_checkpoint(args.scene)
    traj = load_trajectory(args.trajectory)
    cameras = [
        camera_from_pose(traj.positions[i], traj.quaternions[i], args.fov,
                         args.image_size, args.image_size)
        for i in range(len(traj))
    ]
    cfg = SessionConfig(
        mode=args.mode, budget_bytes=args.budget_bytes, ring=args.ring,
        transfer=TransferConfig(args.bandwidth, args.fixed_latency),
        voxel_size=args.voxel_size,
    )
    summary = bench(model, cameras, traj.times, cfg, grid=grid)
    print(json.dumps(summary, sort_keys=True))
    if args.metrics:
        MetricsLog(args.metrics).append({"kind": "bench", **summary})
    return 0


def cmd_serve(args) -> int:
    engine, _, _ = _load_engine(args)

    def render_fn(camera):
        return engine.render(camera)

    server = ViewerServer(render_fn, args.image_size, args.image_size, args.host, args.port)
    print(f"listening on {server.address[0]}:{server.address[1]}", flush=True)
    server.serve_forever()
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="landmark")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="write a deterministic synthetic scene checkpoint")
    _add_common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--prims", type=int, default=200)
    p.add_argument("--cameras", type=int, default=4)
    p.add_argument("--extent", type=float, default=4.0)
    p.add_argument("--grid", type=int, default=2, help="cells per side of the scene grid")
    p.add_argument("--image-size", type=int, default=64)
    p.set_defaults(fn=cmd_gen_scene)

    p = sub.add_parser("train", help="fit appearance parameters to scene ground truth")
    _add_common(p)
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--cameras", type=int, default=4)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--dp", type=int, default=1, help="data-parallel replica count")
    p.add_argument("--budget-bytes", type=int, default=0,
                   help="enable dynamic-loading training under this device budget")
    p.add_argument("--cell-steps", type=int, default=50)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--densify-interval", type=int, default=0)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("render", help="render a trajectory to image files")
    _add_common(p)
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--trajectory", type=Path, required=True)
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--fov", type=float, default=70.0)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("bench", help="deterministic latency/residency summary over a trajectory")
    _add_common(p)
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--trajectory", type=Path, required=True)
    p.add_argument("--mode", choices=("static_full", "block_double_buffer", "frustum_voxel"),
                   default="static_full")
    p.add_argument("--budget-bytes", type=int, default=None)
    p.add_argument("--ring", type=int, default=1)
    p.add_argument("--bandwidth", type=float, default=None, help="bytes per second")
    p.add_argument("--fixed-latency", type=float, default=0.0, help="seconds per transfer")
    p.add_argument("--voxel-size", type=float, default=1.0)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--fov", type=float, default=70.0)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("serve", help="pose-in / frame-out TCP rendering server")
    _add_common(p)
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--image-size", type=int, default=64)
    p.set_defaults(fn=cmd_serve)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
