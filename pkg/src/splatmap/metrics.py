"""Reconstruction quality evaluation.

Coverage is measured against ground-truth surface samples restricted to faces
an agent inside the rooms could actually see; rendering quality is measured
on held-out poses rejection-sampled in free space. Nearest-neighbor queries
run through a KD-tree; tests pin them to exhaustive search on small sets.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import label
from scipy.spatial import cKDTree

from .gaussians import GaussianMap, sigmoid
from .losses import ssim
from .rasterizer import RasterConfig, rasterize
from .scene import SceneModel, sample_gt_surface_with_normals
from .simulator import AgentState, SimConfig, Simulator
from .topdown import Cell, OccupancyGrid, grid_from_scene

PSNR_CAP_DB = 99.0
EMPTY_MAP_COMPLETION_CM = 1000.0


@dataclass
class ViewQuality:
    index: int
    psnr_db: float
    ssim: float
    depth_l1_cm: float
    x: float
    y: float
    yaw_deg: float


@dataclass
class EvalReport:
    completion_ratio: float = 0.0
    completion_cm: float = 0.0
    psnr_db: float = 0.0
    ssim: float = 0.0
    depth_l1_cm: float = 0.0
    path_length_m: float = 0.0
    views: list[ViewQuality] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def reconstruction_points(gmap: GaussianMap, tau_opacity: float = 0.5) -> np.ndarray:
    """Centers of sufficiently opaque Gaussians, the reconstructed surface set."""
    if len(gmap.centers) == 0:
        return np.zeros((0, 3))
    keep = sigmoid(gmap.opacity_logit) > tau_opacity
    return gmap.centers[keep]


def completion_metrics(gt_points, gmap: GaussianMap, tau_dist: float = 0.05,
                       tau_opacity: float = 0.5) -> tuple[float, float]:
    """(ratio %, completion cm): how much of the ground-truth surface set has
    a reconstruction point within `tau_dist`, and the mean nearest distance."""
    gt = np.asarray(gt_points, dtype=np.float64).reshape(-1, 3)
    if len(gt) == 0:
        raise ValueError("ground-truth point set is empty")
    rec = reconstruction_points(gmap, tau_opacity)
    if len(rec) == 0:
        return 0.0, EMPTY_MAP_COMPLETION_CM
    dists, _ = cKDTree(rec).query(gt, k=1)
    ratio = 100.0 * float(np.mean(dists <= tau_dist))
    completion = 100.0 * float(np.mean(dists))
    return ratio, completion


def reachable_free_mask(grid: OccupancyGrid, start_xy) -> np.ndarray:
    """Free cells flood-connected (8-way) to the start position."""
    free = grid.cells == Cell.FREE
    labels, _ = label(free, structure=np.ones((3, 3), dtype=np.int8))
    row, col = grid.world_to_cell(start_xy)
    if not grid.in_bounds(row, col) or not free[row, col]:
        return np.zeros_like(free)
    return labels == labels[row, col]


def _near_reachable(mask: np.ndarray, grid: OccupancyGrid, xy, radius_m: float) -> bool:
    row, col = grid.world_to_cell(xy)
    r = max(1, int(round(radius_m / grid.cell_size)))
    r0, r1 = max(0, row - r), min(mask.shape[0], row + r + 1)
    c0, c1 = max(0, col - r), min(mask.shape[1], col + r + 1)
    if r0 >= r1 or c0 >= c1:
        return False
    return bool(mask[r0:r1, c0:c1].any())


def visible_gt_surface(scene: SceneModel, density: float = 400.0, seed: int = 0,
                       sim_cfg: SimConfig | None = None,
                       near_m: float = 0.5) -> np.ndarray:
    """Ground-truth surface samples an agent inside the scene could observe.

    Starts from exposed-face samples and keeps those adjacent to free space
    flood-reachable from the agent start: vertical faces probe one step along
    their normal; upward faces must sit below the camera height (they are seen
    from above) and downward faces above it, both near reachable cells. Points
    below the floor plane are discarded outright.
    """
    cfg = sim_cfg or SimConfig()
    pts, nrm = sample_gt_surface_with_normals(scene, density, seed)
    grid = grid_from_scene(scene)
    reach = reachable_free_mask(grid, scene.agent_start[:2])
    keep = np.zeros(len(pts), dtype=bool)
    for i in range(len(pts)):
        p, n = pts[i], nrm[i]
        if p[2] < -1e-9:
            continue
        if abs(n[2]) < 0.5:  # vertical face
            probe = p[:2] + n[:2] * (2.0 * grid.cell_size)
            row, col = grid.world_to_cell(probe)
            keep[i] = grid.in_bounds(row, col) and reach[row, col]
        elif n[2] > 0:  # top face, seen from above
            keep[i] = p[2] < cfg.agent_height and _near_reachable(reach, grid, p[:2], near_m)
        else:  # underside, seen from below
            keep[i] = p[2] > cfg.agent_height and _near_reachable(reach, grid, p[:2], near_m)
    return pts[keep]


def sample_test_poses(scene: SceneModel, n: int, seed: int,
                      sim_cfg: SimConfig | None = None) -> list[AgentState]:
    """Rejection-sample collision-free level poses, deterministic per seed."""
    if n <= 0:
        raise ValueError("n must be positive")
    cfg = sim_cfg or SimConfig()
    sim = Simulator(scene, cfg, seed=seed)
    rng = np.random.default_rng(seed)
    lo, hi = scene.bounds_min, scene.bounds_max
    poses: list[AgentState] = []
    attempts = 0
    max_attempts = 10000 * n
    while len(poses) < n and attempts < max_attempts:
        attempts += 1
        x = float(rng.uniform(lo[0], hi[0]))
        y = float(rng.uniform(lo[1], hi[1]))
        yaw = float(rng.uniform(0.0, 360.0))
        if sim.in_collision(x, y):
            continue
        poses.append(AgentState(
            position=np.array([x, y, cfg.agent_height]), yaw_deg=yaw, pitch_deg=0.0))
    if len(poses) < n:
        warnings.warn(f"free space too small: sampled {len(poses)} of {n} poses")
    return poses


def psnr(reference: np.ndarray, rendered: np.ndarray, cap_db: float = PSNR_CAP_DB) -> float:
    mse = float(np.mean((reference - rendered) ** 2))
    if mse <= 10.0 ** (-cap_db / 10.0):
        return cap_db
    return min(cap_db, -10.0 * math.log10(mse))


def view_quality(gmap: GaussianMap, poses: list[AgentState], sim: Simulator,
                 raster_cfg: RasterConfig | None = None) -> list[ViewQuality]:
    """Per-view PSNR / SSIM / depth-L1 against the simulator's ground truth."""
    out: list[ViewQuality] = []
    for i, state in enumerate(poses):
        if sim.in_collision(state.position[0], state.position[1]):
            warnings.warn(f"test pose {i} is in collision; skipped")
            continue
        frame = sim.render_gt(state)
        render = rasterize(gmap, sim.pose_of(state), sim.intrinsics, raster_cfg)
        p = psnr(frame.color, render.color_hat)
        s = ssim(frame.color, render.color_hat).value
        valid = (frame.depth > 0) & (render.depth_hat > 0)
        d = 100.0 * float(np.abs(frame.depth - render.depth_hat)[valid].mean()) if valid.any() else 0.0
        out.append(ViewQuality(index=i, psnr_db=p, ssim=s, depth_l1_cm=d,
                               x=float(state.position[0]), y=float(state.position[1]),
                               yaw_deg=state.yaw_deg))
    return out


def summarize_views(views: list[ViewQuality]) -> tuple[float, float, float]:
    if not views:
        return 0.0, 0.0, 0.0
    return (float(np.mean([v.psnr_db for v in views])),
            float(np.mean([v.ssim for v in views])),
            float(np.mean([v.depth_l1_cm for v in views])))


def path_length(xy: np.ndarray) -> float:
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    if len(xy) < 2:
        return 0.0
    return float(np.sum(np.hypot(*np.diff(xy, axis=0).T)))


METRICS_HEADER = ("step", "completion_ratio", "completion_cm", "path_length_m")


def write_metrics_csv(path, rows) -> None:
    """rows: iterable of (step, completion_ratio, completion_cm, path_length_m)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for row in rows:
            w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row])


def write_eval_json(path, report: EvalReport) -> None:
    with open(path, "w") as fh:
        fh.write(report.to_json())
        fh.write("\n")
