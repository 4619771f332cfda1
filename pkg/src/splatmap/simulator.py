"""Embodied RGB-D simulator over axis-aligned box scenes.

The agent moves on the floor plane at a fixed camera height with discrete
actions; rendering is exact per-pixel raycasting against the scene boxes
(slab method), so depth is noiseless unless a noise sigma is configured.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np
from numba import njit

from .camera import Intrinsics, pixel_directions, pose_from_position
from .scene import SceneModel


class Action(enum.IntEnum):
    MOVE_FORWARD = 0
    TURN_LEFT = 1
    TURN_RIGHT = 2
    TURN_UP = 3
    TURN_DOWN = 4
    STOP = 5


@dataclass(frozen=True)
class AgentState:
    position: np.ndarray  # (3,), z fixed at camera height
    yaw_deg: float
    pitch_deg: float
    step_count: int = 0


@dataclass(frozen=True)
class FrameRGBD:
    color: np.ndarray  # (H, W, 3) float in [0, 1]
    depth: np.ndarray  # (H, W) z-depth in meters, 0 where no surface
    pose: np.ndarray   # 4x4 camera-to-world
    intrinsics: Intrinsics
    step: int = 0


@dataclass
class SimConfig:
    resolution: int = 256
    fov_deg: float = 90.0
    agent_height: float = 1.25
    move_step: float = 0.065
    turn_step_deg: float = 10.0
    pitch_step_deg: float = 15.0
    pitch_limit_deg: float = 90.0
    collision_radius: float = 0.2
    depth_noise_sigma: float = 0.0
    ground_eps: float = 0.1  # boxes lower than this above the floor don't collide


@njit(cache=True)
def _raycast_kernel(origin, dirs, box_lo, box_hi, box_color, checker, out_color, out_depth):
    h, w = dirs.shape[0], dirs.shape[1]
    nb = box_lo.shape[0]
    for i in range(h):
        for j in range(w):
            dx, dy, dz = dirs[i, j, 0], dirs[i, j, 1], dirs[i, j, 2]
            inv = np.empty(3)
            for a in range(3):
                d = dirs[i, j, a]
                if abs(d) < 1e-12:
                    d = 1e-12 if d >= 0 else -1e-12
                inv[a] = 1.0 / d
            t_best = np.inf
            b_best = -1
            for b in range(nb):
                t0 = (box_lo[b, 0] - origin[0]) * inv[0]
                t1 = (box_hi[b, 0] - origin[0]) * inv[0]
                if t0 > t1:
                    t0, t1 = t1, t0
                tn, tf = t0, t1
                t0 = (box_lo[b, 1] - origin[1]) * inv[1]
                t1 = (box_hi[b, 1] - origin[1]) * inv[1]
                if t0 > t1:
                    t0, t1 = t1, t0
                if t0 > tn:
                    tn = t0
                if t1 < tf:
                    tf = t1
                t0 = (box_lo[b, 2] - origin[2]) * inv[2]
                t1 = (box_hi[b, 2] - origin[2]) * inv[2]
                if t0 > t1:
                    t0, t1 = t1, t0
                if t0 > tn:
                    tn = t0
                if t1 < tf:
                    tf = t1
                if tf >= tn and tn > 1e-9 and tn < t_best:
                    t_best = tn
                    b_best = b
            if b_best < 0:
                out_depth[i, j] = 0.0
                out_color[i, j, 0] = 0.0
                out_color[i, j, 1] = 0.0
                out_color[i, j, 2] = 0.0
            else:
                out_depth[i, j] = t_best
                px = origin[0] + t_best * dx
                py = origin[1] + t_best * dy
                pz = origin[2] + t_best * dz
                f = 1.0
                if checker > 0.0:
                    k = math.floor(px / checker) + math.floor(py / checker) + math.floor(pz / checker)
                    if k % 2 != 0:
                        f = 0.72
                out_color[i, j, 0] = box_color[b_best, 0] * f
                out_color[i, j, 1] = box_color[b_best, 1] * f
                out_color[i, j, 2] = box_color[b_best, 2] * f


def _point_box_dist2d(x, y, lo, hi):
    dx = max(lo[0] - x, 0.0, x - hi[0])
    dy = max(lo[1] - y, 0.0, y - hi[1])
    return math.hypot(dx, dy)


class Simulator:
    def __init__(self, model: SceneModel, config: SimConfig | None = None, seed: int = 0):
        self.model = model
        self.config = config or SimConfig()
        self.intrinsics = Intrinsics.from_fov(
            self.config.resolution, self.config.resolution, self.config.fov_deg, self.config.fov_deg
        )
        self._rng = np.random.default_rng(seed)
        lo, hi, col = model.box_arrays()
        self._box_lo = np.ascontiguousarray(lo)
        self._box_hi = np.ascontiguousarray(hi)
        self._box_color = np.ascontiguousarray(col)
        self._collision_boxes = [
            (b.min_corner[:2].copy(), b.max_corner[:2].copy())
            for b in model.obstacle_boxes(self.config.ground_eps)
        ]
        self._dirs_cam = pixel_directions(self.intrinsics)

    def reset(self) -> AgentState:
        x, y, yaw = self.model.agent_start
        pos = np.array([x, y, self.config.agent_height])
        return AgentState(position=pos, yaw_deg=float(yaw), pitch_deg=0.0, step_count=0)

    def pose_of(self, state: AgentState) -> np.ndarray:
        return pose_from_position(state.position, state.yaw_deg, state.pitch_deg)

    def in_collision(self, x: float, y: float) -> bool:
        r = self.config.collision_radius
        if not (
            self.model.bounds_min[0] + r <= x <= self.model.bounds_max[0] - r
            and self.model.bounds_min[1] + r <= y <= self.model.bounds_max[1] - r
        ):
            return True
        for lo, hi in self._collision_boxes:
            if _point_box_dist2d(x, y, lo, hi) < r:
                return True
        return False

    def apply_action(self, state: AgentState, action: Action) -> tuple[AgentState, bool]:
        """Returns the new state and whether a forward move was blocked."""
        cfg = self.config
        blocked = False
        pos, yaw, pitch = state.position, state.yaw_deg, state.pitch_deg
        if action == Action.MOVE_FORWARD:
            nx = pos[0] + cfg.move_step * math.cos(math.radians(yaw))
            ny = pos[1] + cfg.move_step * math.sin(math.radians(yaw))
            if self.in_collision(nx, ny):
                blocked = True
            else:
                pos = np.array([nx, ny, pos[2]])
        elif action == Action.TURN_LEFT:
            yaw = (yaw + cfg.turn_step_deg) % 360.0
        elif action == Action.TURN_RIGHT:
            yaw = (yaw - cfg.turn_step_deg) % 360.0
        elif action == Action.TURN_UP:
            pitch = min(pitch + cfg.pitch_step_deg, cfg.pitch_limit_deg)
        elif action == Action.TURN_DOWN:
            pitch = max(pitch - cfg.pitch_step_deg, -cfg.pitch_limit_deg)
        elif action == Action.STOP:
            pass
        return replace(state, position=pos, yaw_deg=yaw, pitch_deg=pitch, step_count=state.step_count + 1), blocked

    def render_gt(self, state: AgentState) -> FrameRGBD:
        pose = self.pose_of(state)
        dirs_world = self._dirs_cam @ pose[:3, :3].T
        h = w = self.config.resolution
        color = np.empty((h, w, 3), dtype=np.float64)
        depth = np.empty((h, w), dtype=np.float64)
        _raycast_kernel(
            np.ascontiguousarray(pose[:3, 3]),
            np.ascontiguousarray(dirs_world),
            self._box_lo,
            self._box_hi,
            self._box_color,
            float(self.model.checker),
            color,
            depth,
        )
        if self.config.depth_noise_sigma > 0.0:
            noise = self._rng.normal(0.0, self.config.depth_noise_sigma, depth.shape)
            depth = np.where(depth > 0.0, np.maximum(depth + noise, 1e-3), 0.0)
        return FrameRGBD(color=color, depth=depth, pose=pose, intrinsics=self.intrinsics, step=state.step_count)
