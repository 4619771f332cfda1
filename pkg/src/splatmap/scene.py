"""Box-world scene description and ground-truth surface sampling.

A scene file is structured text (key-value plus arrays, YAML syntax) with three
required keys: `bounds` (2D footprint), `agent_start` ({x, y, yaw}) and `boxes`
(axis-aligned, each with `min`, `max`, `color`). One box must act as the floor:
its footprint covers `bounds` and its top face sits at z = 0.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml


class SceneFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SceneBox:
    min_corner: np.ndarray
    max_corner: np.ndarray
    color: np.ndarray


@dataclass
class SceneModel:
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    agent_start: tuple[float, float, float]  # x, y, yaw degrees
    boxes: list[SceneBox] = field(default_factory=list)
    checker: float = 0.0  # checker modulation period in meters, 0 disables
    name: str = ""

    def box_arrays(self):
        lo = np.stack([b.min_corner for b in self.boxes])
        hi = np.stack([b.max_corner for b in self.boxes])
        col = np.stack([b.color for b in self.boxes])
        return lo, hi, col

    def obstacle_boxes(self, ground_eps: float = 0.1):
        """Boxes that stick out above the floor and can be collided with."""
        return [b for b in self.boxes if b.max_corner[2] > ground_eps]


def _as_vec(node, n, what):
    try:
        v = np.asarray(node, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise SceneFormatError(f"{what}: expected {n} numbers, got {node!r}") from exc
    if v.shape != (n,):
        raise SceneFormatError(f"{what}: expected {n} numbers, got shape {v.shape}")
    return v


def fixture_path(name: str) -> Path:
    """Path of a scene fixture shipped with the package (e.g. 'room2')."""
    res = importlib.resources.files("splatmap") / "scenes" / f"{name}.scene"
    return Path(str(res))


def load_scene(path) -> SceneModel:
    """Parse and validate a scene file.

    Raises SceneFormatError on parse failure, missing keys, degenerate boxes,
    a missing floor box, or an agent start in collision.
    """
    path = Path(path)
    if not path.exists() and not path.suffix and path.name == str(path):
        candidate = fixture_path(path.name)
        if candidate.exists():
            path = candidate
    if not path.exists():
        raise SceneFormatError(f"scene file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise SceneFormatError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise SceneFormatError(f"{path}: top level must be a mapping")
    for key in ("bounds", "agent_start", "boxes"):
        if key not in doc:
            raise SceneFormatError(f"{path}: missing required key '{key}'")

    bounds = doc["bounds"]
    bmin = _as_vec(bounds.get("min"), 2, "bounds.min")
    bmax = _as_vec(bounds.get("max"), 2, "bounds.max")
    if np.any(bmax <= bmin):
        raise SceneFormatError("bounds must have positive extent")

    start = doc["agent_start"]
    try:
        agent_start = (float(start["x"]), float(start["y"]), float(start.get("yaw", 0.0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneFormatError(f"agent_start must provide x and y: {exc}") from exc

    boxes = []
    for i, item in enumerate(doc["boxes"]):
        lo = _as_vec(item.get("min"), 3, f"boxes[{i}].min")
        hi = _as_vec(item.get("max"), 3, f"boxes[{i}].max")
        color = _as_vec(item.get("color"), 3, f"boxes[{i}].color")
        if np.any(hi <= lo):
            raise SceneFormatError(f"boxes[{i}] is degenerate: min {lo} max {hi}")
        if np.any(color < 0.0) or np.any(color > 1.0):
            raise SceneFormatError(f"boxes[{i}].color out of [0, 1]: {color}")
        boxes.append(SceneBox(lo, hi, color))

    model = SceneModel(
        bounds_min=bmin,
        bounds_max=bmax,
        agent_start=agent_start,
        boxes=boxes,
        checker=float(doc.get("checker", 0.0)),
        name=path.stem,
    )
    _validate(model)
    return model


def _validate(model: SceneModel, collision_radius: float = 0.2):
    has_floor = False
    for b in model.boxes:
        covers = (
            b.min_corner[0] <= model.bounds_min[0] + 1e-9
            and b.min_corner[1] <= model.bounds_min[1] + 1e-9
            and b.max_corner[0] >= model.bounds_max[0] - 1e-9
            and b.max_corner[1] >= model.bounds_max[1] - 1e-9
            and abs(b.max_corner[2]) <= 1e-6
        )
        if covers:
            has_floor = True
            break
    if not has_floor:
        raise SceneFormatError("scene has no floor box covering the footprint with top at z=0")

    x, y, _ = model.agent_start
    if not (model.bounds_min[0] < x < model.bounds_max[0] and model.bounds_min[1] < y < model.bounds_max[1]):
        raise SceneFormatError("agent_start lies outside the scene bounds")
    for b in model.obstacle_boxes():
        dx = max(b.min_corner[0] - x, 0.0, x - b.max_corner[0])
        dy = max(b.min_corner[1] - y, 0.0, y - b.max_corner[1])
        if np.hypot(dx, dy) < collision_radius:
            raise SceneFormatError("agent_start is in collision with an obstacle box")


_FACES = (
    (0, -1.0),  # x-min face, normal -x
    (0, +1.0),
    (1, -1.0),
    (1, +1.0),
    (2, -1.0),
    (2, +1.0),
)


def _face_samples(box: SceneBox, axis: int, sign: float, density: float, rng) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = box.min_corner, box.max_corner
    others = [a for a in range(3) if a != axis]
    extent = hi[others] - lo[others]
    area = float(extent[0] * extent[1])
    n = int(round(area * density))
    if n <= 0:
        return np.zeros((0, 3)), np.zeros((0, 3))
    pts = np.empty((n, 3))
    pts[:, others[0]] = lo[others[0]] + rng.random(n) * extent[0]
    pts[:, others[1]] = lo[others[1]] + rng.random(n) * extent[1]
    pts[:, axis] = hi[axis] if sign > 0 else lo[axis]
    normals = np.zeros((n, 3))
    normals[:, axis] = sign
    return pts, normals


def sample_gt_surface_with_normals(model: SceneModel, density: float, seed: int):
    """Uniform samples on box faces exposed to free space, with outward normals.

    A sample is discarded when nudging it outward along its face normal lands
    strictly inside another box (so fully shared faces of abutting boxes yield
    nothing, and partially covered faces lose only the covered part).
    """
    rng = np.random.default_rng(seed)
    eps = 1e-4
    all_pts, all_nrm = [], []
    lo_arr, hi_arr, _ = model.box_arrays()
    for bi, box in enumerate(model.boxes):
        for axis, sign in _FACES:
            pts, nrm = _face_samples(box, axis, sign, density, rng)
            if len(pts) == 0:
                continue
            probe = pts + nrm * eps
            inside = np.zeros(len(pts), dtype=bool)
            for bj in range(len(model.boxes)):
                if bj == bi:
                    continue
                in_b = np.all(probe > lo_arr[bj] + 1e-12, axis=1) & np.all(probe < hi_arr[bj] - 1e-12, axis=1)
                inside |= in_b
            keep = ~inside
            if np.any(keep):
                all_pts.append(pts[keep])
                all_nrm.append(nrm[keep])
    if not all_pts:
        return np.zeros((0, 3)), np.zeros((0, 3))
    return np.concatenate(all_pts), np.concatenate(all_nrm)


def sample_gt_surface(model: SceneModel, density: float, seed: int) -> np.ndarray:
    """Uniform surface samples (points only) on exposed box faces."""
    pts, _ = sample_gt_surface_with_normals(model, density, seed)
    return pts
