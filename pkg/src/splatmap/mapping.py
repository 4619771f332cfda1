"""Online map maintenance: gradient optimization, densification, pruning.

Each observed frame drives a short Adam run over all Gaussian parameter
groups, after which under-reconstructed pixels seed new primitives and
degenerate ones are removed. The pixel masks are plain array formulas kept in
standalone functions so they can be checked against hand-built truth tables.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import backproject
from .gaussians import GaussianMap
from .losses import LossConfig, loss_and_render_grads
from .rasterizer import RasterConfig, RasterWorkspace
from .simulator import FrameRGBD

PARAM_GROUPS = ("centers", "log_scales", "quats", "opacity_logit", "color_logit")


@dataclass
class MaskThresholds:
    opacity_low: float = 0.98      # densify when rendered opacity falls below
    mde_multiplier: float = 50.0   # depth-error gate, in units of the frame's median error
    opacity_high: float = 0.8      # high-loss pixels must already render opaque
    depth_error: float = 0.3       # meters of depth disagreement for high-loss


@dataclass
class OptimStats:
    initial_loss: float = 0.0
    final_loss: float = 0.0
    iterations: int = 0
    losses: list = field(default_factory=list)
    aborted_group: str | None = None


def densify_mask(render, frame: FrameRGBD, thresholds: MaskThresholds) -> np.ndarray:
    """Pixels that should seed new primitives.

    A pixel qualifies when the rendered opacity is still low, or when the
    sensor sees geometry in front of the rendered surface by much more than
    the frame's median absolute depth error. Depth comparisons only apply
    where the frame has a depth measurement.
    """
    opacity_term = render.opacity_hat < thresholds.opacity_low
    valid = frame.depth > 0.0
    err = np.abs(frame.depth - render.depth_hat)
    if np.any(valid):
        mde = float(np.median(err[valid]))
    else:
        mde = 0.0
    depth_term = valid & (frame.depth < render.depth_hat) & (err > thresholds.mde_multiplier * mde)
    return opacity_term | depth_term


def high_loss_mask(render, frame: FrameRGBD, thresholds: MaskThresholds) -> np.ndarray:
    """Pixels rendering opaque but at clearly wrong depth.

    These mark already-mapped regions whose geometry disagrees with the
    sensor, so the planner can schedule a second look. Requires a valid frame
    depth at the pixel.
    """
    valid = frame.depth > 0.0
    err = np.abs(frame.depth - render.depth_hat)
    return (
        (render.opacity_hat > thresholds.opacity_high)
        & valid
        & (frame.depth < render.depth_hat)
        & (err > thresholds.depth_error)
    )


def densify(
    gmap: GaussianMap,
    render,
    frame: FrameRGBD,
    thresholds: MaskThresholds,
    cap: int = 5000,
    scale_px: float = 2.0,
    init_opacity: float = 0.5,
    scale_max: float = 0.0,
) -> int:
    """Seed new primitives at masked pixels; returns how many were added.

    Masked pixels with valid depth are back-projected to world space and get
    an isotropic Gaussian colored from the frame. When more pixels qualify
    than the cap allows, an evenly spaced subsample is kept, and the initial
    scale grows with the effective pixel stride so coverage stays contiguous.
    A positive `scale_max` clamps the initial scale in meters, keeping
    far-field newborns from blanketing regions the sensor has barely seen.
    """
    mask = densify_mask(render, frame, thresholds) & (frame.depth > 0.0)
    flat = np.flatnonzero(mask.reshape(-1))
    n = flat.size
    if n == 0:
        return 0
    stride = 1.0
    if n > cap:
        picks = np.round(np.linspace(0, n - 1, cap)).astype(np.int64)
        flat = flat[picks]
        stride = float(np.sqrt(n / cap))
    world = backproject(frame.depth, frame.intrinsics, frame.pose).reshape(-1, 3)[flat]
    depths = frame.depth.reshape(-1)[flat]
    colors = np.clip(frame.color.reshape(-1, 3)[flat], 1e-4, 1.0 - 1e-4)
    scales = scale_px * stride * depths / frame.intrinsics.fx
    if scale_max > 0.0:
        scales = np.minimum(scales, scale_max)
    gmap.append(colors, world, scales, opacity=init_opacity)
    return flat.size


def prune(gmap: GaussianMap, opacity_floor: float = 0.05, scale_ceiling: float = 0.5,
          optimizer: "MapOptimizer | None" = None) -> int:
    """Drop primitives that went transparent or ballooned; returns count removed."""
    if len(gmap) == 0:
        return 0
    keep = (gmap.opacities >= opacity_floor) & (gmap.scales.max(axis=1) <= scale_ceiling)
    if optimizer is not None and not np.all(keep):
        optimizer.notify_keep(keep)
    return gmap.keep(keep)


class MapOptimizer:
    """Adam over the five parameter groups with map-growth-aware state.

    Moment buffers are padded when densification appends primitives and
    filtered when pruning drops them, so optimizer history follows each
    surviving primitive.
    """

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8
    # Adam rescales even float-cancellation residue (~1e-18 from the SSIM
    # adjoint at exact convergence) into full-size steps, so anything below
    # numerical noise is treated as a true zero to keep fixed points fixed.
    GRAD_FLUSH = 1e-14

    def __init__(self, gmap: GaussianMap, loss_cfg: LossConfig | None = None,
                 raster_cfg: RasterConfig | None = None):
        self.gmap = gmap
        self.loss_cfg = loss_cfg or LossConfig()
        self.raster_cfg = raster_cfg or RasterConfig()
        self._m = {}
        self._v = {}
        self._t = 0
        self.last_grads = None
        self._sync()

    def _sync(self):
        for name in PARAM_GROUPS:
            arr = getattr(self.gmap, name)
            cur = self._m.get(name)
            if cur is None or cur.shape != arr.shape:
                m = np.zeros_like(arr)
                v = np.zeros_like(arr)
                if cur is not None and cur.shape[0] <= arr.shape[0]:
                    m[: cur.shape[0]] = cur
                    v[: cur.shape[0]] = self._v[name]
                self._m[name] = m
                self._v[name] = v

    def notify_keep(self, mask: np.ndarray):
        for name in PARAM_GROUPS:
            self._m[name] = self._m[name][mask]
            self._v[name] = self._v[name][mask]

    def _lr(self, name: str) -> float:
        cfg = self.loss_cfg
        return {
            "centers": cfg.lr_centers,
            "log_scales": cfg.lr_scales,
            "quats": cfg.lr_rotation,
            "opacity_logit": cfg.lr_opacity,
            "color_logit": cfg.lr_color,
        }[name]

    def step(self, frame: FrameRGBD) -> tuple[float, str | None]:
        """One gradient step against the frame. Returns (loss, aborted_group)."""
        self._sync()
        ws = RasterWorkspace(self.gmap, frame.pose, frame.intrinsics, self.raster_cfg)
        out = ws.forward()
        total, _, d_color, d_depth = loss_and_render_grads(out, frame, self.loss_cfg)
        grads = ws.backward(d_color, d_depth)
        for name in PARAM_GROUPS:
            if not np.all(np.isfinite(grads[name])):
                return total, name
            g = grads[name]
            g[np.abs(g) < self.GRAD_FLUSH] = 0.0
        self.last_grads = grads
        self._t += 1
        c1 = 1.0 - self.BETA1 ** self._t
        c2 = 1.0 - self.BETA2 ** self._t
        for name in PARAM_GROUPS:
            g = grads[name]
            m = self._m[name]
            v = self._v[name]
            m *= self.BETA1
            m += (1.0 - self.BETA1) * g
            v *= self.BETA2
            v += (1.0 - self.BETA2) * g * g
            getattr(self.gmap, name)[...] -= self._lr(name) * (m / c1) / (np.sqrt(v / c2) + self.EPS)
        self.gmap.normalize_quats()
        return total, None


def optimize_step(
    gmap: GaussianMap,
    frame: FrameRGBD,
    cfg: LossConfig | None = None,
    iters: int | None = None,
    optimizer: MapOptimizer | None = None,
    raster_cfg: RasterConfig | None = None,
) -> OptimStats:
    """Run a short optimization burst of `iters` steps against one frame."""
    cfg = cfg or LossConfig()
    if optimizer is None:
        optimizer = MapOptimizer(gmap, cfg, raster_cfg)
    n = cfg.iterations if iters is None else iters
    stats = OptimStats()
    for _ in range(n):
        loss, aborted = optimizer.step(frame)
        if not stats.losses:
            stats.initial_loss = loss
        stats.losses.append(loss)
        stats.final_loss = loss
        if aborted is not None:
            stats.aborted_group = aborted
            break
        stats.iterations += 1
    return stats
