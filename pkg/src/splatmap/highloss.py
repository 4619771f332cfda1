"""Temporal tracking of confidently-wrong map regions and rotation planning.

High-loss pixels (opaque render, surface behind the observation) are
back-projected and clustered each frame; clusters persist across frames,
merging when they fall within a merge radius, and resolve once the region
renders opaque with no fresh hits for several consecutive looks. At a goal
node the agent's rotation plan combines panorama low-visibility bearings
with bearings of unresolved clusters nearby, ordered to minimize total turn.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import permutations

import numpy as np
from sklearn.cluster import DBSCAN

from .camera import backproject, invert_pose
from .panorama import PanoramaVisibility, cluster_rotations
from .simulator import FrameRGBD


@dataclass
class HighLossCluster:
    id: int
    points: np.ndarray           # (n, 3)
    centroid: np.ndarray         # (3,)
    last_seen_step: int = 0
    clean_streak: int = 0
    resolved: bool = False


@dataclass
class TrackerConfig:
    eps: float = 0.2
    min_pts: int = 10
    merge_radius: float = 0.3
    tau_opaque: float = 0.8
    resolve_after: int = 3
    max_points: int = 256


def _cluster_points(points: np.ndarray, cfg: TrackerConfig):
    if len(points) < cfg.min_pts:
        return []
    labels = DBSCAN(eps=cfg.eps, min_samples=cfg.min_pts).fit_predict(points)
    out = []
    for lab in range(labels.max() + 1):
        pts = points[labels == lab]
        out.append((pts, pts.mean(axis=0)))
    return out


def track_high_loss(
    clusters: list[HighLossCluster],
    mask: np.ndarray,
    frame: FrameRGBD,
    render=None,
    step: int = 0,
    cfg: TrackerConfig | None = None,
) -> list[HighLossCluster]:
    """Fold this frame's high-loss mask into the persistent cluster list."""
    cfg = cfg or TrackerConfig()
    sel = mask & (frame.depth > 0)
    fresh = []
    if sel.any():
        world = backproject(frame.depth, frame.intrinsics, frame.pose)[sel]
        if len(world) > 4 * cfg.max_points:
            stride = len(world) // (4 * cfg.max_points) + 1
            world = world[::stride]
        fresh = _cluster_points(world, cfg)

    next_id = max((c.id for c in clusters), default=-1) + 1
    hit_ids = set()
    for pts, centroid in fresh:
        target = None
        best = cfg.merge_radius
        for c in clusters:
            if c.resolved:
                continue
            d = float(np.linalg.norm(c.centroid - centroid))
            if d <= best:
                target = c
                best = d
        if target is None:
            clusters.append(HighLossCluster(
                id=next_id, points=pts[: cfg.max_points], centroid=centroid,
                last_seen_step=step))
            next_id += 1
        else:
            merged = np.vstack([target.points, pts])[-cfg.max_points:]
            target.points = merged
            target.centroid = merged.mean(axis=0)
            target.last_seen_step = step
            target.clean_streak = 0
            hit_ids.add(target.id)

    if render is not None:
        world_to_cam = invert_pose(frame.pose)
        intr = frame.intrinsics
        for c in clusters:
            if c.resolved or c.id in hit_ids:
                continue
            p_cam = world_to_cam[:3, :3] @ c.centroid + world_to_cam[:3, 3]
            if p_cam[2] <= 0.05:
                continue
            u = intr.fx * p_cam[0] / p_cam[2] + intr.cx
            v = intr.fy * p_cam[1] / p_cam[2] + intr.cy
            j = int(round(u - 0.5))
            i = int(round(v - 0.5))
            if not (0 <= i < intr.height and 0 <= j < intr.width):
                continue
            if render.opacity_hat[i, j] > cfg.tau_opaque:
                c.clean_streak += 1
                if c.clean_streak >= cfg.resolve_after:
                    c.resolved = True
    return clusters


def bearing_to(origin, target) -> tuple[float, float]:
    """(yaw, pitch) in degrees from `origin` toward `target`, world frame."""
    d = np.asarray(target, dtype=np.float64) - np.asarray(origin, dtype=np.float64)
    yaw = float(np.degrees(np.arctan2(d[1], d[0]))) % 360.0
    pitch = float(np.degrees(np.arctan2(d[2], np.hypot(d[0], d[1]))))
    return yaw, pitch


def _yaw_gap(a: float, b: float) -> float:
    return abs((a - b + 180.0) % 360.0 - 180.0)


def order_by_turn(targets: list[tuple[float, float]], start_yaw: float) -> list[tuple[float, float]]:
    """Visit order minimizing cumulative yaw rotation from `start_yaw`.

    Exhaustive for up to 6 targets, greedy nearest-yaw beyond that.
    """
    if len(targets) <= 1:
        return list(targets)

    def cost(order):
        total, yaw = 0.0, start_yaw
        for t in order:
            total += _yaw_gap(t[0], yaw)
            yaw = t[0]
        return total

    if len(targets) <= 6:
        return list(min(permutations(targets), key=cost))
    remaining = list(targets)
    out, yaw = [], start_yaw
    while remaining:
        nxt = min(remaining, key=lambda t: _yaw_gap(t[0], yaw))
        remaining.remove(nxt)
        out.append(nxt)
        yaw = nxt[0]
    return out


def select_rotation(
    agent_state,
    pano: PanoramaVisibility,
    clusters: list[HighLossCluster],
    reach: float = 3.0,
    dedupe_deg: float = 15.0,
) -> list[tuple[float, float]]:
    """Rotation targets at a goal node: panorama gaps plus nearby unresolved
    high-loss bearings, deduplicated by yaw and ordered by total turn."""
    agent_pos = np.array([agent_state.position[0], agent_state.position[1], agent_state.position[2]])
    targets = list(cluster_rotations(pano))
    for c in clusters:
        if c.resolved:
            continue
        if np.linalg.norm(c.centroid[:2] - agent_pos[:2]) <= reach:
            targets.append(bearing_to(agent_pos, c.centroid))
    dedup: list[tuple[float, float]] = []
    for t in targets:
        if all(_yaw_gap(t[0], u[0]) >= dedupe_deg for u in dedup):
            dedup.append(t)
    return order_by_turn(dedup, float(agent_state.yaw_deg))
