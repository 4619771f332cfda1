"""Top-down workspace extraction from the Gaussian map.

Two orthographic accumulated-opacity images are built by splatting Gaussian
XY marginals over a ground slab (centers within ground_eps of the floor) and
an obstacle slab (between ground_eps and the agent's head height). Cells
whose obstacle-slab opacity is high are obstacles; remaining cells with solid
ground coverage are free; everything else is unexplored.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np
from numba import njit
from scipy.ndimage import distance_transform_edt

from .gaussians import GaussianMap, rotations_from_quats


class Cell(IntEnum):
    UNKNOWN = 0
    FREE = 1
    OBSTACLE = 2


@dataclass
class TopdownConfig:
    cell_size: float = 0.05
    ground_eps: float = 0.15
    agent_height: float = 1.25
    tau_occ: float = 0.5
    dilate_radius: float = 0.2
    blur: float = 0.3           # isotropic cell-space variance floor, anti-gap
    alpha_clamp: float = 0.995
    f_cut: float = 1e-3         # accumulation cutoff defining the footprint


@dataclass
class OccupancyGrid:
    origin: np.ndarray          # world xy of the (0, 0) cell corner
    cell_size: float
    cells: np.ndarray           # (rows, cols) int8 of Cell values; row = y

    @property
    def shape(self):
        return self.cells.shape

    def world_to_cell(self, xy) -> tuple[int, int]:
        xy = np.asarray(xy, dtype=np.float64)
        col = int(np.floor((xy[0] - self.origin[0]) / self.cell_size))
        row = int(np.floor((xy[1] - self.origin[1]) / self.cell_size))
        return row, col

    def cell_to_world(self, row: int, col: int) -> np.ndarray:
        return self.origin + (np.array([col, row], dtype=np.float64) + 0.5) * self.cell_size

    def in_bounds(self, row: int, col: int) -> bool:
        return 0 <= row < self.cells.shape[0] and 0 <= col < self.cells.shape[1]

    def state_at(self, xy) -> Cell:
        row, col = self.world_to_cell(xy)
        if not self.in_bounds(row, col):
            return Cell.UNKNOWN
        return Cell(self.cells[row, col])


@njit(cache=True)
def _accumulate_kernel(cxy, cov, opac, origin, cell_size, blur, clamp, f_cut, log_t):
    rows, cols = log_t.shape
    for i in range(cxy.shape[0]):
        a = cov[i, 0, 0] / (cell_size * cell_size) + blur
        b = cov[i, 0, 1] / (cell_size * cell_size)
        d = cov[i, 1, 1] / (cell_size * cell_size) + blur
        det = a * d - b * b
        if det <= 1e-12:
            continue
        qa = d / det
        qb = -b / det
        qd = a / det
        o = opac[i]
        if o <= f_cut:
            continue
        # radius where o*exp(-q/2) falls to f_cut, in units of the largest st.dev.
        k2 = 2.0 * np.log(o / f_cut)
        half = (a + d) * 0.5
        swing = np.sqrt(max(half * half - det, 0.0))
        rad = np.sqrt(max(k2 * (half + swing), 0.0)) + 1.0
        mx = (cxy[i, 0] - origin[0]) / cell_size - 0.5
        my = (cxy[i, 1] - origin[1]) / cell_size - 0.5
        c0 = max(int(np.floor(mx - rad)), 0)
        c1 = min(int(np.ceil(mx + rad)), cols - 1)
        r0 = max(int(np.floor(my - rad)), 0)
        r1 = min(int(np.ceil(my + rad)), rows - 1)
        for r in range(r0, r1 + 1):
            dy = r - my
            for c in range(c0, c1 + 1):
                dx = c - mx
                q = qa * dx * dx + 2.0 * qb * dx * dy + qd * dy * dy
                if q > k2:
                    continue
                f = o * np.exp(-0.5 * q)
                if f < f_cut:
                    continue
                if f > clamp:
                    f = clamp
                log_t[r, c] += np.log(1.0 - f)


@njit(cache=True)
def _height_kernel(cxy, cz, cov, opac, origin, cell_size, blur, f_cut, height):
    rows, cols = height.shape
    for i in range(cxy.shape[0]):
        a = cov[i, 0, 0] / (cell_size * cell_size) + blur
        b = cov[i, 0, 1] / (cell_size * cell_size)
        d = cov[i, 1, 1] / (cell_size * cell_size) + blur
        det = a * d - b * b
        if det <= 1e-12 or opac[i] <= 0.25:
            continue
        qa = d / det
        qb = -b / det
        qd = a / det
        k2 = 2.0 * np.log(opac[i] / 0.25)
        half = (a + d) * 0.5
        swing = np.sqrt(max(half * half - det, 0.0))
        rad = np.sqrt(max(k2 * (half + swing), 0.0)) + 1.0
        mx = (cxy[i, 0] - origin[0]) / cell_size - 0.5
        my = (cxy[i, 1] - origin[1]) / cell_size - 0.5
        c0 = max(int(np.floor(mx - rad)), 0)
        c1 = min(int(np.ceil(mx + rad)), cols - 1)
        r0 = max(int(np.floor(my - rad)), 0)
        r1 = min(int(np.ceil(my + rad)), rows - 1)
        for r in range(r0, r1 + 1):
            dy = r - my
            for c in range(c0, c1 + 1):
                dx = c - mx
                q = qa * dx * dx + 2.0 * qb * dx * dy + qd * dy * dy
                if q > k2:
                    continue
                if opac[i] * np.exp(-0.5 * q) > 0.25 and cz[i] > height[r, c]:
                    height[r, c] = cz[i]


def _xy_covariances(gmap: GaussianMap, idx: np.ndarray) -> np.ndarray:
    rot = rotations_from_quats(gmap.quats[idx])
    s = gmap.scales[idx]
    m = rot * s[:, None, :]
    full = m @ np.transpose(m, (0, 2, 1))
    return np.ascontiguousarray(full[:, :2, :2])


def render_topdown(gmap: GaussianMap, bounds, cfg: TopdownConfig | None = None):
    """Orthographic slab opacities over `bounds` = (xmin, ymin, xmax, ymax).

    Returns (opacity_ground, opacity_obstacle, height_map, origin); images are
    indexed [row=y, col=x]. Opacity per cell is order-independent alpha
    accumulation of every Gaussian whose center height lies in the slab.
    """
    cfg = cfg or TopdownConfig()
    xmin, ymin, xmax, ymax = map(float, bounds)
    cols = max(int(np.ceil((xmax - xmin) / cfg.cell_size)), 1)
    rows = max(int(np.ceil((ymax - ymin) / cfg.cell_size)), 1)
    origin = np.array([xmin, ymin], dtype=np.float64)
    shape = (rows, cols)
    out = []
    z = gmap.centers[:, 2] if len(gmap) else np.zeros(0)
    slabs = (
        (z >= -cfg.ground_eps) & (z <= cfg.ground_eps),
        (z > cfg.ground_eps) & (z <= cfg.agent_height),
    )
    for slab in slabs:
        log_t = np.zeros(shape, dtype=np.float64)
        idx = np.flatnonzero(slab)
        if idx.size:
            _accumulate_kernel(
                np.ascontiguousarray(gmap.centers[idx, :2]),
                _xy_covariances(gmap, idx),
                gmap.opacities[idx],
                origin,
                cfg.cell_size,
                cfg.blur,
                cfg.alpha_clamp,
                cfg.f_cut,
                log_t,
            )
        out.append(1.0 - np.exp(log_t))
    height = np.zeros(shape, dtype=np.float64)
    idx = np.flatnonzero((z >= -cfg.ground_eps) & (z <= cfg.agent_height))
    if idx.size:
        _height_kernel(
            np.ascontiguousarray(gmap.centers[idx, :2]),
            np.ascontiguousarray(gmap.centers[idx, 2]),
            _xy_covariances(gmap, idx),
            gmap.opacities[idx],
            origin,
            cfg.cell_size,
            cfg.blur,
            cfg.f_cut,
            height,
        )
    return out[0], out[1], height, origin


def classify_workspace(opacity_ground, opacity_obstacle, origin, cell_size,
                       tau_occ: float = 0.5) -> OccupancyGrid:
    """Label cells Obstacle, then Free, then Unknown, in that precedence."""
    cells = np.zeros(opacity_ground.shape, dtype=np.int8)
    cells[opacity_ground > tau_occ] = Cell.FREE
    cells[opacity_obstacle > tau_occ] = Cell.OBSTACLE
    return OccupancyGrid(origin=np.asarray(origin, dtype=np.float64),
                         cell_size=float(cell_size), cells=cells)


def dilate_obstacles(grid: OccupancyGrid, radius: float) -> OccupancyGrid:
    """Grow obstacles by `radius` meters so plans keep agent clearance."""
    if radius <= 0:
        return OccupancyGrid(grid.origin.copy(), grid.cell_size, grid.cells.copy())
    dist = distance_transform_edt(grid.cells != Cell.OBSTACLE) * grid.cell_size
    cells = grid.cells.copy()
    cells[dist <= radius] = Cell.OBSTACLE
    return OccupancyGrid(grid.origin.copy(), grid.cell_size, cells)


def stamp_traversed(grid: OccupancyGrid, xy: np.ndarray, radius: float) -> OccupancyGrid:
    """Mark cells swept by the agent disc at each pose in `xy` as Free.

    The forward camera rarely images the floor directly underfoot, so walked
    corridors can stay Unknown and split the free region into islands. Every
    pose in `xy` was occupied collision-free, which is direct evidence the
    disc around it is traversable. Unknown cells within `radius` of a pose
    become Free; Obstacle cells are left alone.
    """
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    cells = grid.cells.copy()
    if xy.size:
        rows, cols = cells.shape
        seed = np.zeros_like(cells, dtype=bool)
        c = np.clip(((xy[:, 0] - grid.origin[0]) / grid.cell_size).astype(np.int64), 0, cols - 1)
        r = np.clip(((xy[:, 1] - grid.origin[1]) / grid.cell_size).astype(np.int64), 0, rows - 1)
        seed[r, c] = True
        near = distance_transform_edt(~seed) * grid.cell_size <= radius
        cells[near & (cells == Cell.UNKNOWN)] = Cell.FREE
    return OccupancyGrid(grid.origin.copy(), grid.cell_size, cells)


def workspace_from_map(gmap: GaussianMap, bounds, cfg: TopdownConfig | None = None) -> OccupancyGrid:
    """One-call pipeline: render slabs, classify, no dilation."""
    cfg = cfg or TopdownConfig()
    og, oo, _, origin = render_topdown(gmap, bounds, cfg)
    return classify_workspace(og, oo, origin, cfg.cell_size, cfg.tau_occ)


def grid_from_scene(scene, cell_size: float = 0.05, ground_eps: float = 0.1) -> OccupancyGrid:
    """Ground-truth occupancy from scene boxes, for evaluation only."""
    xmin, ymin = scene.bounds_min[0], scene.bounds_min[1]
    xmax, ymax = scene.bounds_max[0], scene.bounds_max[1]
    cols = int(np.ceil((xmax - xmin) / cell_size))
    rows = int(np.ceil((ymax - ymin) / cell_size))
    cells = np.full((rows, cols), Cell.FREE, dtype=np.int8)
    origin = np.array([xmin, ymin], dtype=np.float64)
    xs = origin[0] + (np.arange(cols) + 0.5) * cell_size
    ys = origin[1] + (np.arange(rows) + 0.5) * cell_size
    for box in scene.obstacle_boxes(ground_eps):
        c0 = np.searchsorted(xs, box.min_corner[0])
        c1 = np.searchsorted(xs, box.max_corner[0])
        r0 = np.searchsorted(ys, box.min_corner[1])
        r1 = np.searchsorted(ys, box.max_corner[1])
        cells[r0:r1, c0:c1] = Cell.OBSTACLE
    return OccupancyGrid(origin=origin, cell_size=cell_size, cells=cells)
