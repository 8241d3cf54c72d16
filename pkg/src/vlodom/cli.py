"""Command-line entry point.

Subcommands: run, eval, synth, gradcheck, cluster-viz, train.
Log level comes from ``VLODOM_LOG_LEVEL`` (default WARNING); logs go to
stderr so stdout and output files stay byte-stable.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import parallel
from .config import PipelineConfig
from .errors import InvalidInputError, LoadError, ParseError
from .geometry import Pose, parse_pose_line, write_poses

log = logging.getLogger("vlodom")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _load_config(arg: Optional[str], seed: Optional[int]) -> PipelineConfig:
    if arg is None or arg == "full":
        cfg = PipelineConfig.full()
    elif arg == "micro":
        cfg = PipelineConfig.micro()
    else:
        cfg = PipelineConfig.load(arg)
    if seed is not None:
        cfg.seed = seed
    return cfg


def _load_weights(path, cfg):
    from .layers import ParamStore
    from .model import init_params

    expected = init_params(cfg, 0).shapes()
    return ParamStore.load(path, expected=expected)


def _read_traj(path) -> List[np.ndarray]:
    lines = Path(path).read_text().splitlines()
    return [parse_pose_line(l, i) for i, l in enumerate(lines, 1) if l.strip()]


# --- subcommands -----------------------------------------------------------


def cmd_run(args) -> int:
    from .dataio import KittiSequence, load_calib_matrices
    from .model import estimate

    cfg = _load_config(args.config, args.seed)
    store = _load_weights(args.weights, cfg)
    seq = KittiSequence(args.data, args.seq, pad_to=cfg.image_size)
    if len(seq) < 2:
        raise InvalidInputError(f"sequence {args.seq} needs at least two frames")
    lidar = [Pose.identity()]
    times = []
    for i, (src, tgt) in enumerate(seq.pairs()):
        t0 = time.perf_counter()
        T = estimate(store, src, tgt, cfg)
        times.append(time.perf_counter() - t0)
        # T maps frame-i points into frame i+1; the sensor moved by its inverse
        lidar.append(lidar[-1] @ T.inverse())
        log.info("pair %d: %.1f ms", i, 1e3 * times[-1])
    Tr = load_calib_matrices(seq.calib_path).get("Tr")
    if Tr is not None:
        Tr_inv = np.linalg.inv(Tr)
        poses = [Tr @ P.matrix() @ Tr_inv for P in lidar]
    else:
        poses = [P.matrix() for P in lidar]
    out = Path(args.out)
    with open(out, "w") as f:
        from .geometry import format_pose_line

        for M in poses:
            f.write(format_pose_line(M) + "\n")
    log.warning("mean inference time per pair: %.1f ms over %d pairs", 1e3 * float(np.mean(times)), len(times))
    print(f"wrote {len(poses)} poses to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import DEFAULT_LENGTHS, kitti_eval, plot_trajectories

    gt, est = _read_traj(args.gt), _read_traj(args.est)
    if len(gt) != len(est):
        raise InvalidInputError(f"trajectory lengths differ: gt {len(gt)} vs est {len(est)}")
    lengths = [int(v) for v in args.lengths.split(",")] if args.lengths else DEFAULT_LENGTHS
    res = kitti_eval(gt, est, lengths, args.step)
    print(res.report())
    if args.plot:
        plot_trajectories(args.plot, gt, est)
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synth import generate_pair, generate_sequence, micro_camera, write_sequence

    seed = 0 if args.seed is None else args.seed
    if args.frames < 2:
        raise InvalidInputError("--frames must be >= 2")
    if args.frames == 2:
        pair = generate_pair(seed, n_points=args.points)
        scans, images = [pair.source, pair.target], [pair.source_image, pair.target_image]
        poses = [Pose.identity(), pair.gt.inverse()]
        cam = pair.camera
    else:
        scans, images, poses, cam = generate_sequence(seed, args.frames, n_points=args.points)
    seq = write_sequence(args.out, args.seq, scans, images, cam, poses)
    print(f"wrote {len(scans)} frames to {seq}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    cfg = _load_config(args.config or "micro", None)
    seed = 0 if args.seed is None else args.seed
    report = run_gradcheck(seed, cfg, end_to_end=not args.no_end_to_end, corrupt=args.corrupt_adjoint)
    print(report.format())
    return EXIT_OK if report.ok else EXIT_FAIL


def cmd_cluster_viz(args) -> int:
    from .dataio import KittiSequence
    from .model import init_params
    from .viz import cluster_map, render_overlay, write_ppm

    cfg = _load_config(args.config, args.seed)
    store = _load_weights(args.weights, cfg) if args.weights else init_params(cfg)
    seq = KittiSequence(args.data, args.seq, pad_to=cfg.image_size)
    if not 0 <= args.frame < len(seq):
        raise InvalidInputError(f"frame {args.frame} out of range [0, {len(seq)})")
    frame = seq.frame(args.frame)
    labels = cluster_map(store, frame, cfg, args.level)
    rgb = render_overlay(frame.image, labels)
    write_ppm(args.out, rgb)
    n = int(labels.max()) + 1 if labels.max() >= 0 else 0
    print(f"level {args.level}: {n} clusters, {int(np.sum(labels < 0))} unassigned pixels -> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .synth import generate_pair
    from .train import micro_train

    cfg = _load_config(args.config or "micro", args.seed)
    pair = generate_pair(args.pair_seed, n_points=args.points)
    res = micro_train(cfg, pair, steps=args.steps, learning_rate=args.lr)
    rot, trans = res.errors(pair.gt)
    for i in range(0, len(res.losses), max(1, args.report_every)):
        print(f"step {i:5d} loss {res.losses[i]:.6f}")
    print(f"final rotation error {rot:.4f} deg, translation error {trans:.5f} m")
    if args.out:
        res.params.save(args.out, dtype="<f8")
        print(f"saved weights to {args.out}")
    return EXIT_OK


# --- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file, or a built-in profile name: full, micro")
    common.add_argument("--seed", type=int, help="seed override")
    common.add_argument("--threads", type=int, default=1, help="worker threads for per-point kernels")

    p = argparse.ArgumentParser(prog="vlodom", description="Visual-LiDAR odometry tools")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", parents=[common], help="estimate a trajectory for a KITTI-layout sequence")
    r.add_argument("--data", required=True, help="dataset root (contains sequences/)")
    r.add_argument("--seq", required=True, help="sequence id, e.g. 00")
    r.add_argument("--weights", required=True, help="weight manifest path")
    r.add_argument("--out", required=True, help="output trajectory (KITTI pose format)")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", parents=[common], help="KITTI relative drift of an estimated trajectory")
    e.add_argument("--gt", required=True)
    e.add_argument("--est", required=True)
    e.add_argument("--plot", help="optional PNG with both trajectories")
    e.add_argument("--lengths", help="comma-separated segment lengths in meters (default 100,...,800)")
    e.add_argument("--step", type=int, default=10, help="frame step between segment starts")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic sequence in KITTI layout")
    s.add_argument("--out", required=True, help="dataset root to create")
    s.add_argument("--seq", default="00")
    s.add_argument("--frames", type=int, default=2)
    s.add_argument("--points", type=int, default=512)
    s.set_defaults(func=cmd_synth)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of all adjoints")
    g.add_argument("--no-end-to-end", action="store_true", help="skip the full-network check")
    g.add_argument("--corrupt-adjoint", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    c = sub.add_parser("cluster-viz", parents=[common], help="render the pixel clustering of one frame")
    c.add_argument("--data", required=True)
    c.add_argument("--seq", required=True)
    c.add_argument("--frame", type=int, default=0)
    c.add_argument("--weights", help="weight manifest (default: fresh initialization from the seed)")
    c.add_argument("--level", type=int, default=0, choices=range(4))
    c.add_argument("--out", required=True, help="output PPM image")
    c.set_defaults(func=cmd_cluster_viz)

    t = sub.add_parser("train", parents=[common], help="overfit the network on a synthetic pair")
    t.add_argument("--steps", type=int, default=500)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--pair-seed", type=int, default=7)
    t.add_argument("--points", type=int, default=512)
    t.add_argument("--report-every", type=int, default=50)
    t.add_argument("--out", help="save trained weights here")
    t.set_defaults(func=cmd_train)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = os.environ.get("VLODOM_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    parallel.set_threads(args.threads)
    from threadpoolctl import threadpool_limits

    try:
        # single-threaded BLAS keeps floating-point reductions identical across runs
        with threadpool_limits(limits=1):
            return args.func(args)
    except (InvalidInputError, LoadError, ParseError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
