"""Pinhole camera model shared by the simulator, the rasterizer and the planner.

Conventions: world frame has z up, the floor top sits at z = 0. The camera frame
is x right, y down, z forward. Yaw is measured counter-clockwise about world z
(yaw 0 faces +x), pitch is positive upward. Depth images store camera-frame z
("z-depth"), not euclidean ray length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Intrinsics:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float

    @classmethod
    def from_fov(cls, width: int, height: int, fov_h_deg: float, fov_v_deg: float) -> "Intrinsics":
        fx = width / (2.0 * math.tan(math.radians(fov_h_deg) / 2.0))
        fy = height / (2.0 * math.tan(math.radians(fov_v_deg) / 2.0))
        return cls(width, height, fx, fy, width / 2.0, height / 2.0)


def rotation_yaw_pitch(yaw_deg: float, pitch_deg: float) -> np.ndarray:
    """Camera-to-world rotation for an agent heading (columns: right, down, forward)."""
    cy, sy = math.cos(math.radians(yaw_deg)), math.sin(math.radians(yaw_deg))
    cp, sp = math.cos(math.radians(pitch_deg)), math.sin(math.radians(pitch_deg))
    right = (sy, -cy, 0.0)
    down = (sp * cy, sp * sy, -cp)
    forward = (cy * cp, sy * cp, sp)
    return np.array([right, down, forward], dtype=np.float64).T


def pose_from_position(position, yaw_deg: float, pitch_deg: float) -> np.ndarray:
    """4x4 camera-to-world transform."""
    pose = np.eye(4)
    pose[:3, :3] = rotation_yaw_pitch(yaw_deg, pitch_deg)
    pose[:3, 3] = np.asarray(position, dtype=np.float64)
    return pose


def invert_pose(pose: np.ndarray) -> np.ndarray:
    inv = np.eye(4)
    r = pose[:3, :3].T
    inv[:3, :3] = r
    inv[:3, 3] = -r @ pose[:3, 3]
    return inv


def pixel_directions(intr: Intrinsics) -> np.ndarray:
    """Camera-frame ray directions through pixel centers, z normalized to 1.

    Returns an (H, W, 3) array; with z = 1 the ray parameter of a hit equals
    its z-depth, and back-projection is depth * direction.
    """
    u = (np.arange(intr.width) + 0.5 - intr.cx) / intr.fx
    v = (np.arange(intr.height) + 0.5 - intr.cy) / intr.fy
    dirs = np.empty((intr.height, intr.width, 3), dtype=np.float64)
    dirs[..., 0] = u[None, :]
    dirs[..., 1] = v[:, None]
    dirs[..., 2] = 1.0
    return dirs


def backproject(depth: np.ndarray, intr: Intrinsics, pose: np.ndarray) -> np.ndarray:
    """Lift a depth image to world points. Pixels with depth <= 0 yield NaN rows."""
    dirs = pixel_directions(intr)
    pts = dirs * depth[..., None]
    pts = pts @ pose[:3, :3].T + pose[:3, 3]
    pts[depth <= 0.0] = np.nan
    return pts
