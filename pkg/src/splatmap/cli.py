"""Command-line entry points: run an exploration, evaluate it, refine it.

Heavy imports are deferred into the subcommand handlers so the ASPL_THREADS
cap lands in the environment before numpy, numba, or BLAS initialize.
"""

from __future__ import annotations

import argparse
import os
import sys

STRATEGY_CHOICES = ("random", "position", "viewpoint", "full")

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "NUMBA_NUM_THREADS",
)


def _cap_threads() -> None:
    cap = os.environ.get("ASPL_THREADS")
    if not cap:
        return
    for var in _THREAD_VARS:
        os.environ.setdefault(var, cap)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="splatmap",
        description="Online Gaussian-splat mapping with topology-guided exploration.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="explore a scene and write the run artifacts")
    run.add_argument("--scene", required=True,
                     help="scene file path or bundled fixture name (e.g. room2)")
    run.add_argument("--steps", type=int, default=0,
                     help="action budget; 0 picks it from the scene floor area")
    run.add_argument("--seed", type=int, default=0, help="run seed")
    run.add_argument("--strategy", choices=STRATEGY_CHOICES, default="full",
                     help="exploration strategy")
    run.add_argument("--no-hp", action="store_true",
                     help="disable hierarchical local-first goal selection")
    run.add_argument("--debug-images", action="store_true",
                     help="write observed/rendered image pairs while running")
    run.add_argument("--config", default=None,
                     help="YAML overlay applied on top of the packaged defaults")
    run.add_argument("--out", required=True, help="output directory")

    ev = sub.add_parser("eval", help="score a finished run's map snapshot")
    ev.add_argument("--run", required=True, help="run directory")
    ev.add_argument("--views", type=int, default=None,
                    help="number of held-out test views (default from config)")
    ev.add_argument("--seed", type=int, default=None,
                    help="test-view seed (default: the run seed)")

    rf = sub.add_parser("refine", help="offline-refine a finished run's map")
    rf.add_argument("--run", required=True, help="run directory")
    rf.add_argument("--iters", type=int, default=None,
                    help="refinement iterations (default from config)")
    rf.add_argument("--no-depth-loss", action="store_true",
                    help="optimize photometric error only")
    return p


def _cmd_run(args) -> int:
    from .config import default_config_path, load_config
    from .runner import run_experiment

    cfg = load_config(default_config_path())
    if args.config:
        cfg = load_config(args.config, base=cfg)
    cfg.scene = args.scene
    cfg.seed = args.seed
    cfg.strategy = args.strategy
    cfg.use_hp = not args.no_hp
    cfg.debug_images = args.debug_images
    if args.steps:
        cfg.loop.steps = args.steps
    result = run_experiment(cfg, args.out)
    print(f"scene {result.scene} strategy {result.strategy} seed {result.seed}")
    print(f"steps {result.steps_executed} ({result.stop_reason}), "
          f"{result.blocked_moves} blocked moves")
    print(f"graph {result.nodes_visited}/{result.nodes_total} nodes visited, "
          f"map {result.map_size} gaussians, {result.keyframes} keyframes")
    print(f"completion {result.completion_ratio:.2f}% "
          f"({result.completion_cm:.2f} cm), path {result.path_length_m:.2f} m")
    print(f"wall time {result.wall_time_s:.1f} s, artifacts in {result.out_dir}")
    return 0


def _cmd_eval(args) -> int:
    from .runner import evaluate_run

    report = evaluate_run(args.run, n_views=args.views, seed=args.seed)
    print(f"completion {report.completion_ratio:.2f}% ({report.completion_cm:.2f} cm)")
    print(f"novel views ({len(report.views)}): psnr {report.psnr_db:.2f} dB, "
          f"ssim {report.ssim:.4f}, depth L1 {report.depth_l1_cm:.2f} cm")
    print(f"path length {report.path_length_m:.2f} m")
    return 0


def _cmd_refine(args) -> int:
    from .runner import refine_run

    payload = refine_run(args.run, iters=args.iters,
                         use_depth_loss=not args.no_depth_loss)
    b, a = payload["before"], payload["after"]
    print(f"refined {payload['iters']} iterations "
          f"(depth loss {'on' if payload['use_depth_loss'] else 'off'})")
    print(f"train psnr {b['train_psnr_db']:.2f} -> {a['train_psnr_db']:.2f} dB, "
          f"depth L1 {b['train_depth_l1_cm']:.2f} -> {a['train_depth_l1_cm']:.2f} cm")
    print(f"map {b['map_size']} -> {a['map_size']} gaussians "
          f"(+{payload['cloned']} cloned, +{payload['split']} split, "
          f"-{payload['pruned']} pruned)")
    return 0


def main(argv=None) -> int:
    _cap_threads()
    args = build_parser().parse_args(argv)
    from .config import ConfigError
    from .gaussians import MapFormatError
    from .scene import SceneFormatError

    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "eval":
            return _cmd_eval(args)
        return _cmd_refine(args)
    except (ConfigError, SceneFormatError, MapFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
