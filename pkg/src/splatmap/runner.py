"""Experiment orchestration: the perception-action loop and run artifacts.

One `run` executes the closed loop on a scene: observe an RGB-D frame, fold
it into the Gaussian map (track high-loss regions, densify, optimize, prune),
periodically rebuild the top-down workspace with its Voronoi graph and
re-score the nodes, then let the planner emit the next action. Artifacts
land in the output directory: a resolved config copy, trajectory.csv,
metrics.csv, planner.log, the map snapshot, the keyframe buffer, and a
run.json summary. Evaluation and offline refinement read those artifacts
back instead of re-running anything.
"""

from __future__ import annotations

import json
import shutil
import time
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .camera import Intrinsics
from .config import RunnerConfig, load_config, save_config
from .gaussians import GaussianMap
from .highloss import HighLossCluster, select_rotation, track_high_loss
from .losses import LossConfig, ssim
from .mapping import MapOptimizer, densify, high_loss_mask, prune
from .metrics import (
    EvalReport,
    completion_metrics,
    path_length,
    psnr,
    sample_test_poses,
    summarize_views,
    view_quality,
    visible_gt_surface,
    write_eval_json,
    write_metrics_csv,
)
from .planner import PlanContext, Planner, apply_partition, graph_distances, partition_subregions
from .rasterizer import RasterWorkspace, rasterize
from .refine import RefineStats, keyframe_loss, refine
from .scene import SceneModel, fixture_path, load_scene
from .scoring import score_nodes
from .simulator import Action, FrameRGBD, Simulator
from .topdown import dilate_obstacles, stamp_traversed, workspace_from_map
from .voronoi import VoronoiGraph, extract_voronoi, update_graph

TRAJECTORY_HEADER = "step,x,y,yaw,pitch,action\n"
SNAPSHOT_NAME = "map.aspl"
REFINED_NAME = "map_refined.aspl"
KEYFRAMES_NAME = "keyframes.npz"


def substream(seed: int, name: str) -> int:
    """Deterministic per-purpose child seed of the single run seed."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


def resolve_scene(name_or_path: str) -> Path:
    p = Path(name_or_path)
    if p.suffix == ".scene" or p.exists():
        if not p.exists():
            raise FileNotFoundError(f"scene file not found: {p}")
        return p
    fp = fixture_path(name_or_path)
    if not fp.exists():
        raise FileNotFoundError(f"no scene fixture named {name_or_path!r}")
    return fp


def auto_budget(scene: SceneModel, cfg: RunnerConfig) -> int:
    if cfg.loop.steps > 0:
        return cfg.loop.steps
    area = float((scene.bounds_max[0] - scene.bounds_min[0])
                 * (scene.bounds_max[1] - scene.bounds_min[1]))
    return cfg.loop.small_steps if area <= cfg.loop.medium_area_m2 else cfg.loop.medium_steps


@dataclass
class RunResult:
    out_dir: str
    scene: str
    seed: int
    strategy: str
    use_hp: bool
    steps_executed: int
    stop_reason: str
    blocked_moves: int
    nodes_total: int
    nodes_visited: int
    map_size: int
    keyframes: int
    completion_ratio: float
    completion_cm: float
    path_length_m: float
    wall_time_s: float


def _write_debug_image(path: Path, observed: np.ndarray, rendered: np.ndarray) -> None:
    from PIL import Image

    pair = np.concatenate([observed, rendered], axis=1)
    Image.fromarray((np.clip(pair, 0.0, 1.0) * 255).astype(np.uint8)).save(path)


def save_keyframes(path, frames: list[FrameRGBD]) -> None:
    intr = frames[0].intrinsics
    np.savez_compressed(
        path,
        color=np.stack([f.color for f in frames]).astype(np.float32),
        depth=np.stack([f.depth for f in frames]).astype(np.float32),
        pose=np.stack([f.pose for f in frames]),
        step=np.array([f.step for f in frames], dtype=np.int64),
        intrinsics=np.array([intr.width, intr.height, intr.fx, intr.fy, intr.cx, intr.cy]),
    )


def load_keyframes(path) -> list[FrameRGBD]:
    with np.load(path) as data:
        w, h, fx, fy, cx, cy = data["intrinsics"]
        intr = Intrinsics(width=int(w), height=int(h), fx=float(fx), fy=float(fy),
                          cx=float(cx), cy=float(cy))
        return [
            FrameRGBD(color=data["color"][i].astype(np.float64),
                      depth=data["depth"][i].astype(np.float64),
                      pose=data["pose"][i],
                      intrinsics=intr,
                      step=int(data["step"][i]))
            for i in range(len(data["step"]))
        ]


class Runner:
    """State for one closed-loop exploration run."""

    def __init__(self, cfg: RunnerConfig, out_dir):
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.scene = load_scene(resolve_scene(cfg.scene))
        self.sim = Simulator(self.scene, cfg.sim, seed=substream(cfg.seed, "simulator"))
        self.gmap = GaussianMap()
        self.optimizer = MapOptimizer(self.gmap, cfg.splat.loss, cfg.splat.raster)
        self.planner = Planner(cfg.sim, cfg.plan.planner, cfg.strategy, cfg.use_hp,
                               seed=substream(cfg.seed, "planner"))
        self.bounds = (float(self.scene.bounds_min[0]), float(self.scene.bounds_min[1]),
                       float(self.scene.bounds_max[0]), float(self.scene.bounds_max[1]))
        self.graph: VoronoiGraph | None = None
        self.clusters: list[HighLossCluster] = []
        self.keyframes: list[FrameRGBD] = []
        self.trajectory: list[np.ndarray] = []
        self.log_lines: list[str] = []

    def _refresh_graph(self, state) -> None:
        grid = workspace_from_map(self.gmap, self.bounds, self.cfg.workspace.topdown)
        grid = dilate_obstacles(grid, self.cfg.workspace.topdown.dilate_radius)
        traj = np.array(self.trajectory) if self.trajectory else None
        swept = [state.position[:2]]
        if traj is not None:
            swept.append(traj[:, :2])
        grid = stamp_traversed(grid, np.vstack([np.atleast_2d(p) for p in swept]),
                               self.cfg.sim.collision_radius)
        new = extract_voronoi(grid, self.cfg.workspace.spur_factor)
        self.graph = update_graph(self.graph or VoronoiGraph(), new, traj,
                                  self.cfg.workspace.visit_radius,
                                  self.cfg.workspace.match_radius)
        if not self.graph.nodes or self.cfg.strategy == "random":
            return
        agent_xy = state.position[:2]
        start = self.graph.nearest_node(agent_xy)
        dists = graph_distances(self.graph, start.id)
        agent_sub = -1
        if self.planner.use_hp:
            part = partition_subregions(self.graph, agent_xy,
                                        self.cfg.plan.planner.subregion_cut)
            apply_partition(self.graph, part)
            agent_sub = part.local_id
        lowvis: dict[int, float] = {}
        hulls: dict[int, float] = {}
        for node in self.graph.nodes:
            if node.visited:
                continue
            pano = self._render_pano(node.position)
            lowvis[node.id] = pano.lowvis_fraction
            hulls[node.id] = float(sum(self._hull_volumes(pano, node.position)))
        score_nodes(self.graph, lowvis, hulls, agent_sub, dists,
                    self.cfg.view.weights, self.cfg.view.horizon)

    def _render_pano(self, position):
        from .panorama import render_panorama

        return render_panorama(self.gmap, position, self.cfg.view.pano)

    def _hull_volumes(self, pano, position):
        from .panorama import hull_volume

        return hull_volume(pano, position, self.cfg.view.pano.max_range)

    def _rotation_plan(self, state):
        def plan(node_id: int) -> list[tuple[float, float]]:
            if self.graph is None:
                return []
            try:
                node = self.graph.node_by_id(node_id)
            except KeyError:  # id from before a graph rebuild
                return []
            pano = self._render_pano(node.position)
            return select_rotation(state, pano, self.clusters,
                                   self.cfg.view.rotation_reach,
                                   self.cfg.view.dedupe_deg)
        return plan

    def run(self) -> RunResult:
        cfg = self.cfg
        out = self.out_dir
        out.mkdir(parents=True, exist_ok=True)
        if cfg.debug_images:
            (out / "debug").mkdir(exist_ok=True)
        save_config(cfg, out / "config.yaml")

        gt_points = visible_gt_surface(self.scene, cfg.metrics.gt_density,
                                       seed=substream(cfg.seed, "gt_surface"),
                                       sim_cfg=cfg.sim)
        budget = auto_budget(self.scene, cfg)
        state = self.sim.reset()
        self.trajectory.append(state.position[:2].copy())

        traj_rows: list[str] = []
        metrics_rows: list[tuple] = []
        blocked = False
        blocked_moves = 0
        stop_reason = "budget"
        steps_executed = 0
        t0 = time.perf_counter()

        for step in range(budget):
            frame = self.sim.render_gt(state)
            render = rasterize(self.gmap, frame.pose, self.sim.intrinsics, cfg.splat.raster)
            hl = high_loss_mask(render, frame, cfg.splat.thresholds)
            self.clusters = track_high_loss(self.clusters, hl, frame, render,
                                            step, cfg.view.tracker)
            densify(self.gmap, render, frame, cfg.splat.thresholds,
                    cfg.splat.densify_cap, cfg.splat.densify_scale_px,
                    cfg.splat.densify_init_opacity, cfg.splat.densify_scale_max)
            for _ in range(cfg.splat.loss.iterations):
                loss, aborted = self.optimizer.step(frame)
                if aborted is not None:
                    raise RuntimeError(
                        f"non-finite {aborted} gradient at step {step}; aborting run")
            if cfg.loop.prune_every > 0 and step % cfg.loop.prune_every == 0:
                prune(self.gmap, cfg.splat.opacity_floor, cfg.splat.scale_ceiling,
                      self.optimizer)
            if cfg.loop.keyframe_every > 0 and step % cfg.loop.keyframe_every == 0:
                self.keyframes.append(frame)

            if step % cfg.plan.replan_interval == 0 or self.planner.needs_selection:
                self._refresh_graph(state)

            ctx = PlanContext(agent=state, graph=self.graph, blocked=blocked,
                              rotation_plan=self._rotation_plan(state))
            action = self.planner.step(ctx)
            traj_rows.append(
                f"{step},{state.position[0]:.6f},{state.position[1]:.6f},"
                f"{state.yaw_deg:.6f},{state.pitch_deg:.6f},{action.name}\n")

            if cfg.debug_images and step % cfg.loop.debug_every == 0:
                _write_debug_image(out / "debug" / f"step_{step:05d}.png",
                                   frame.color, render.color_hat)
            if step % cfg.loop.metrics_every == 0:
                ratio, comp = completion_metrics(gt_points, self.gmap,
                                                 cfg.metrics.tau_dist,
                                                 cfg.metrics.tau_opacity)
                metrics_rows.append((step, ratio, comp,
                                     path_length(np.array(self.trajectory))))

            steps_executed = step + 1
            if action == Action.STOP:
                stop_reason = "explored"
                break
            state, blocked = self.sim.apply_action(state, action)
            if blocked:
                blocked_moves += 1
            self.trajectory.append(state.position[:2].copy())

        ratio, comp = completion_metrics(gt_points, self.gmap, cfg.metrics.tau_dist,
                                         cfg.metrics.tau_opacity)
        total_path = path_length(np.array(self.trajectory))
        metrics_rows.append((steps_executed, ratio, comp, total_path))

        with open(out / "trajectory.csv", "w", newline="") as fh:
            fh.write(TRAJECTORY_HEADER)
            fh.writelines(traj_rows)
        write_metrics_csv(out / "metrics.csv", metrics_rows)
        with open(out / "planner.log", "w") as fh:
            fh.write("\n".join(self.planner.log_lines))
            if self.planner.log_lines:
                fh.write("\n")
        self.gmap.save(out / SNAPSHOT_NAME)
        if self.keyframes:
            save_keyframes(out / KEYFRAMES_NAME, self.keyframes)
        if self.graph is not None:
            (out / "graph.txt").write_text(self.graph.to_text())

        nodes_total = len(self.graph.nodes) if self.graph else 0
        nodes_visited = sum(1 for n in self.graph.nodes if n.visited) if self.graph else 0
        result = RunResult(
            out_dir=str(out),
            scene=cfg.scene,
            seed=cfg.seed,
            strategy=cfg.strategy,
            use_hp=cfg.use_hp,
            steps_executed=steps_executed,
            stop_reason=stop_reason,
            blocked_moves=blocked_moves,
            nodes_total=nodes_total,
            nodes_visited=nodes_visited,
            map_size=len(self.gmap),
            keyframes=len(self.keyframes),
            completion_ratio=ratio,
            completion_cm=comp,
            path_length_m=total_path,
            wall_time_s=time.perf_counter() - t0,
        )
        with open(out / "run.json", "w") as fh:
            json.dump(asdict(result), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return result


def run_experiment(cfg: RunnerConfig, out_dir) -> RunResult:
    return Runner(cfg, out_dir).run()


def _load_run(run_dir) -> tuple[RunnerConfig, Path]:
    run_dir = Path(run_dir)
    cfg_path = run_dir / "config.yaml"
    if not run_dir.is_dir() or not cfg_path.exists():
        raise FileNotFoundError(f"{run_dir} is not a run directory (no config.yaml)")
    return load_config(cfg_path), run_dir


def evaluate_run(run_dir, n_views: int | None = None, seed: int | None = None) -> EvalReport:
    """Load a run's snapshot and score it: completion plus novel-view quality."""
    cfg, run_dir = _load_run(run_dir)
    snapshot = run_dir / SNAPSHOT_NAME
    if not snapshot.exists():
        raise FileNotFoundError(f"{run_dir} has no map snapshot")
    gmap = GaussianMap.load(snapshot)
    scene = load_scene(resolve_scene(cfg.scene))
    n_views = cfg.metrics.n_views if n_views is None else n_views
    seed = cfg.seed if seed is None else seed

    gt_points = visible_gt_surface(scene, cfg.metrics.gt_density,
                                   seed=substream(cfg.seed, "gt_surface"), sim_cfg=cfg.sim)
    ratio, comp = completion_metrics(gt_points, gmap, cfg.metrics.tau_dist,
                                     cfg.metrics.tau_opacity)
    sim = Simulator(scene, cfg.sim, seed=substream(seed, "eval_render"))
    poses = sample_test_poses(scene, n_views, substream(seed, "eval_poses"), cfg.sim)
    views = view_quality(gmap, poses, sim, cfg.splat.raster)
    mean_psnr, mean_ssim, mean_depth = summarize_views(views)

    length = 0.0
    traj_path = run_dir / "trajectory.csv"
    if traj_path.exists():
        rows = np.genfromtxt(traj_path, delimiter=",", skip_header=1, usecols=(1, 2))
        length = path_length(rows.reshape(-1, 2))

    report = EvalReport(completion_ratio=ratio, completion_cm=comp, psnr_db=mean_psnr,
                        ssim=mean_ssim, depth_l1_cm=mean_depth, path_length_m=length,
                        views=views)
    write_eval_json(run_dir / "eval.json", report)
    return report


def train_view_report(gmap: GaussianMap, keyframes: list[FrameRGBD],
                      loss_cfg: LossConfig | None = None,
                      raster_cfg=None) -> dict:
    """PSNR / SSIM / depth L1 / loss of the map against its own keyframes."""
    lc = loss_cfg or LossConfig()
    psnrs, ssims, depths = [], [], []
    for frame in keyframes:
        out = RasterWorkspace(gmap, frame.pose, frame.intrinsics, raster_cfg).forward()
        psnrs.append(psnr(frame.color, out.color_hat))
        ssims.append(ssim(frame.color, out.color_hat).value)
        valid = (frame.depth > 0) & (out.depth_hat > 0)
        depths.append(100.0 * float(np.abs(frame.depth - out.depth_hat)[valid].mean())
                      if valid.any() else 0.0)
    return {
        "train_psnr_db": float(np.mean(psnrs)),
        "train_ssim": float(np.mean(ssims)),
        "train_depth_l1_cm": float(np.mean(depths)),
        "train_loss": keyframe_loss(gmap, keyframes, lc, raster_cfg),
        "map_size": len(gmap),
    }


def refine_run(run_dir, iters: int | None = None, use_depth_loss: bool = True) -> dict:
    """Offline-refine a run's snapshot; writes map_refined.aspl and refine.json."""
    cfg, run_dir = _load_run(run_dir)
    snapshot = run_dir / SNAPSHOT_NAME
    if not snapshot.exists():
        raise FileNotFoundError(f"{run_dir} has no map snapshot")
    kf_path = run_dir / KEYFRAMES_NAME
    if not kf_path.exists():
        raise FileNotFoundError(f"{run_dir} has no keyframe buffer")
    iters = cfg.refine.iters if iters is None else iters

    refined_path = run_dir / REFINED_NAME
    if iters == 0:
        # Unchanged map: copy the snapshot bytes so the hashes match exactly.
        shutil.copyfile(snapshot, refined_path)
        gmap = GaussianMap.load(snapshot)
        keyframes = load_keyframes(kf_path)
        report = train_view_report(gmap, keyframes, cfg.splat.loss, cfg.splat.raster)
        payload = {"iters": 0, "use_depth_loss": use_depth_loss,
                   "before": report, "after": report,
                   "cloned": 0, "split": 0, "pruned": 0}
    else:
        gmap = GaussianMap.load(snapshot)
        keyframes = load_keyframes(kf_path)
        before = train_view_report(gmap, keyframes, cfg.splat.loss, cfg.splat.raster)
        stats = RefineStats()
        refine(gmap, keyframes, iters, use_depth_loss=use_depth_loss,
               seed=substream(cfg.seed, "refine"), cfg=cfg.refine.cfg,
               loss_cfg=cfg.splat.loss, raster_cfg=cfg.splat.raster, stats=stats)
        after = train_view_report(gmap, keyframes, cfg.splat.loss, cfg.splat.raster)
        gmap.save(refined_path)
        payload = {"iters": iters, "use_depth_loss": use_depth_loss,
                   "before": before, "after": after,
                   "cloned": stats.n_cloned, "split": stats.n_split,
                   "pruned": stats.n_pruned}
    with open(run_dir / "refine.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return payload
