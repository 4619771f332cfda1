"""Panoramic visibility rendering and low-visibility clustering.

A node's surroundings are rendered by three level pinhole cameras (yaws 0,
120, 240 degrees; 120 x 150 degree FOV each) and resampled into one 150x360
equirectangular opacity/range image, one degree per pixel, rows running from
pitch -75 up to +75. Low-opacity pixels are clustered with DBSCAN using a
yaw-wraparound metric, and each cluster's contour can be back-projected into
a 3D convex hull to estimate how much unseen volume the node overlooks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt
from scipy.spatial import ConvexHull, QhullError
from sklearn.cluster import DBSCAN

from .camera import Intrinsics, invert_pose, pose_from_position
from .gaussians import GaussianMap
from .rasterizer import RasterConfig, RasterWorkspace

PANO_ROWS = 150
PANO_COLS = 360
_CAM_YAWS = (0.0, 120.0, 240.0)


@dataclass
class PanoConfig:
    tau_vis: float = 0.5
    pinhole_res: int = 216
    eps_px: float = 8.0
    min_pts: int = 20
    max_range: float = 10.0
    height: float = 1.25
    # Positive cap on how many low-visibility pixels are fed to the density
    # clustering; bigger masks are evenly decimated first (0 = no cap).
    cluster_cap: int = 0
    # Gaussians near the camera plane (floor or ceiling splats almost directly
    # above or below a node) blow up under EWA projection and smear across the
    # whole pinhole image, so the panorama clips nearer than the agent camera.
    raster: RasterConfig = field(default_factory=lambda: RasterConfig(znear=0.2))


@dataclass
class PanoCluster:
    center_yaw: float
    center_pitch: float
    pixel_count: int
    contour_rows: np.ndarray
    contour_cols: np.ndarray
    member_mask: np.ndarray      # (150, 360) bool


@dataclass
class PanoramaVisibility:
    opacity: np.ndarray          # (150, 360)
    range_m: np.ndarray          # (150, 360) euclidean distance, 0 = nothing hit
    lowvis_mask: np.ndarray      # (150, 360) bool
    clusters: list[PanoCluster] = field(default_factory=list)

    @property
    def lowvis_fraction(self) -> float:
        return float(self.lowvis_mask.mean())


def pano_directions() -> np.ndarray:
    """Unit world directions for every panorama pixel, shape (150, 360, 3)."""
    pitch = np.deg2rad((np.arange(PANO_ROWS) + 0.5) - 75.0)
    yaw = np.deg2rad(np.arange(PANO_COLS) + 0.5)
    cp, sp = np.cos(pitch)[:, None], np.sin(pitch)[:, None]
    cy, sy = np.cos(yaw)[None, :], np.sin(yaw)[None, :]
    out = np.empty((PANO_ROWS, PANO_COLS, 3))
    out[..., 0] = cp * cy
    out[..., 1] = cp * sy
    out[..., 2] = np.broadcast_to(sp, (PANO_ROWS, PANO_COLS))
    return out


_DIRS = pano_directions()


def render_panorama(gmap: GaussianMap, position, cfg: PanoConfig | None = None) -> PanoramaVisibility:
    """Equirectangular visibility at `position` (2- or 3-vector, meters)."""
    cfg = cfg or PanoConfig()
    position = np.asarray(position, dtype=np.float64)
    if position.size == 2:
        position = np.array([position[0], position[1], cfg.height])
    res = cfg.pinhole_res
    half = res / 2.0
    fx = half / np.tan(np.deg2rad(60.0))
    fy = half / np.tan(np.deg2rad(75.0))
    intr = Intrinsics(width=res, height=res, fx=fx, fy=fy, cx=half, cy=half)

    opacity = np.zeros((PANO_ROWS, PANO_COLS))
    rng_img = np.zeros((PANO_ROWS, PANO_COLS))
    yaw_deg = np.arange(PANO_COLS) + 0.5
    for cam_yaw in _CAM_YAWS:
        delta = (yaw_deg - cam_yaw + 180.0) % 360.0 - 180.0
        cols = np.flatnonzero(np.abs(delta) <= 60.0)
        if cols.size == 0:
            continue
        pose = pose_from_position(position, cam_yaw, 0.0)
        ws = RasterWorkspace(gmap, pose, intr, cfg.raster)
        cam_opacity, cam_depth, _ = ws.forward_opacity_depth()
        world_to_cam = invert_pose(pose)
        d = _DIRS[:, cols, :].reshape(-1, 3)
        d_cam = d @ world_to_cam[:3, :3].T
        z = d_cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = fx * d_cam[:, 0] / z + half
            v = fy * d_cam[:, 1] / z + half
        j = np.clip(np.round(u - 0.5).astype(np.int64), 0, res - 1)
        i = np.clip(np.round(v - 0.5).astype(np.int64), 0, res - 1)
        ok = z > 1e-9
        j[~ok] = 0
        i[~ok] = 0
        op = np.where(ok, cam_opacity[i, j], 0.0)
        zd = np.where(ok, cam_depth[i, j], 0.0)
        scale = np.where(ok, np.sqrt(d_cam[:, 0] ** 2 + d_cam[:, 1] ** 2 + z**2) / np.maximum(z, 1e-9), 0.0)
        opacity[:, cols] = op.reshape(PANO_ROWS, cols.size)
        rng_img[:, cols] = (zd * scale).reshape(PANO_ROWS, cols.size)

    lowvis = opacity < cfg.tau_vis
    pano = PanoramaVisibility(opacity=opacity, range_m=rng_img, lowvis_mask=lowvis)
    pano.clusters = _cluster_lowvis(lowvis, cfg.eps_px, cfg.min_pts, cfg.cluster_cap)
    return pano


def _cluster_lowvis(mask: np.ndarray, eps_px: float, min_pts: int,
                    cluster_cap: int = 0) -> list[PanoCluster]:
    pts = np.argwhere(mask)
    if len(pts) == 0:
        return []
    if cluster_cap > 0 and len(pts) > cluster_cap:
        # Even decimation in scan order; the density threshold shrinks with
        # the kept fraction so cluster membership stays roughly the same.
        keep = np.round(np.linspace(0, len(pts) - 1, cluster_cap)).astype(np.int64)
        min_pts = max(3, int(round(min_pts * cluster_cap / len(pts))))
        pts = pts[keep]
    radius = PANO_COLS / (2.0 * np.pi)
    theta = 2.0 * np.pi * pts[:, 1] / PANO_COLS
    embed = np.column_stack([
        pts[:, 0].astype(np.float64),
        radius * np.cos(theta),
        radius * np.sin(theta),
    ])
    labels = DBSCAN(eps=eps_px, min_samples=min_pts).fit_predict(embed)
    clusters = []
    for lab in range(labels.max() + 1):
        sel = labels == lab
        rows = pts[sel, 0]
        cols = pts[sel, 1]
        member = np.zeros_like(mask)
        member[rows, cols] = True
        ang = 2.0 * np.pi * cols / PANO_COLS
        mean_yaw = np.rad2deg(np.arctan2(np.sin(ang).mean(), np.cos(ang).mean())) % 360.0 + 0.5
        mean_pitch = (rows.mean() + 0.5) - 75.0
        left = member[rows, (cols - 1) % PANO_COLS]
        right = member[rows, (cols + 1) % PANO_COLS]
        up = np.where(rows > 0, member[np.maximum(rows - 1, 0), cols], False)
        down = np.where(rows < PANO_ROWS - 1, member[np.minimum(rows + 1, PANO_ROWS - 1), cols], False)
        interior = left & right & up & down
        clusters.append(PanoCluster(
            center_yaw=float(mean_yaw % 360.0),
            center_pitch=float(mean_pitch),
            pixel_count=int(sel.sum()),
            contour_rows=rows[~interior],
            contour_cols=cols[~interior],
            member_mask=member,
        ))
    clusters.sort(key=lambda c: -c.pixel_count)
    return clusters


def cluster_rotations(pano: PanoramaVisibility, eps_px: float = 8.0,
                      min_pts: int = 20) -> list[tuple[float, float]]:
    """(yaw, pitch) targets for each low-visibility cluster, biggest first."""
    clusters = pano.clusters or _cluster_lowvis(pano.lowvis_mask, eps_px, min_pts)
    return [(c.center_yaw, c.center_pitch) for c in clusters]


def hull_volume(pano: PanoramaVisibility, node_pos, max_range: float = 10.0) -> list[float]:
    """Convex-hull volume (m^3) of each cluster's back-projected contour.

    Contour pixels carry no range of their own (they are exactly the unseen
    pixels), so each borrows the range of the nearest visible pixel, capped
    at max_range when nothing visible is nearby or the map has no surface
    there.
    """
    node_pos = np.asarray(node_pos, dtype=np.float64)
    if node_pos.size == 2:
        node_pos = np.array([node_pos[0], node_pos[1], 1.25])
    visible = ~pano.lowvis_mask & (pano.range_m > 0)
    if visible.any():
        _, (ir, ic) = distance_transform_edt(~visible, return_indices=True)
        border_range = pano.range_m[ir, ic]
    else:
        border_range = np.full(pano.range_m.shape, max_range)
    border_range = np.clip(border_range, 0.0, max_range)
    border_range[border_range == 0.0] = max_range

    volumes = []
    for c in pano.clusters:
        r, q = c.contour_rows, c.contour_cols
        pts = node_pos + _DIRS[r, q] * border_range[r, q][:, None]
        pts = np.vstack([pts, node_pos])
        volumes.append(hull_volume_of_points(pts))
    return volumes


def hull_volume_of_points(pts: np.ndarray) -> float:
    """Volume of the 3D convex hull of `pts`; 0 for degenerate inputs."""
    pts = np.asarray(pts, dtype=np.float64)
    if len(pts) < 4:
        return 0.0
    try:
        return float(ConvexHull(pts).volume)
    except QhullError:
        return 0.0
