"""Offline map refinement from the stored keyframe buffer.

The online pass trades quality for latency: it runs a handful of gradient
steps per frame and only ever adds primitives where the densification mask
fires. This module runs the long version after exploration ends. It cycles
the keyframes in seeded random order, and every ``density_interval`` steps
applies density control: primitives whose positional gradient stayed large
since the last control pass are either split (when they are big enough that
one blob visibly under-fits) or cloned in place, and transparent or ballooned
primitives are pruned.

Density control never runs as the very last act of ``refine``; freshly added
children always get at least one optimization stretch, otherwise exact clones
would double-count opacity in the returned map.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .gaussians import GaussianMap, rotations_from_quats
from .losses import LossConfig, loss_and_render_grads
from .mapping import MapOptimizer, prune
from .rasterizer import RasterConfig, RasterWorkspace
from .simulator import FrameRGBD

log = logging.getLogger(__name__)

_LN2 = float(np.log(2.0))


@dataclass
class RefineConfig:
    # Positional-gradient norm averaged since the last control pass; above
    # this a primitive is considered under-converged and gets densified.
    grad_threshold: float = 2e-4
    # Split when the largest scale axis exceeds this (meters), else clone.
    split_size: float = 0.05
    density_interval: int = 500
    opacity_floor: float = 0.05
    scale_ceiling: float = 0.5


@dataclass
class RefineStats:
    losses: list[float] = field(default_factory=list)
    n_cloned: int = 0
    n_split: int = 0
    n_pruned: int = 0


def keyframe_select(history: list, n: int) -> list:
    """Uniform stride pick of n frames by position in the history.

    Asking for more frames than exist returns everything with a warning.
    """
    if n <= 0:
        raise ValueError(f"keyframe_select needs n >= 1, got {n}")
    if n >= len(history):
        if n > len(history):
            log.warning("keyframe_select: asked for %d of %d frames, taking all", n, len(history))
        return list(history)
    stride = max(1, len(history) // n)
    return [history[stride * i] for i in range(n)]


def density_control(
    gmap: GaussianMap,
    optimizer: MapOptimizer,
    avg_grad: np.ndarray,
    cfg: RefineConfig,
) -> tuple[int, int, int]:
    """One clone-or-split-then-prune pass; returns (cloned, split, pruned).

    ``avg_grad`` is the per-primitive positional gradient norm averaged since
    the previous pass. Hot primitives above ``split_size`` are replaced by two
    children placed half a max-scale apart along the principal axis with all
    scales halved; smaller hot primitives are duplicated in place. Children
    inherit color, opacity, and orientation.
    """
    n = len(gmap)
    if n == 0:
        return 0, 0, 0
    if avg_grad.shape != (n,):
        raise ValueError(f"avg_grad shape {avg_grad.shape} does not match map size {n}")

    hot = avg_grad > cfg.grad_threshold
    max_scale = gmap.scales.max(axis=1)
    split_mask = hot & (max_scale > cfg.split_size)
    clone_mask = hot & ~split_mask
    n_split = int(split_mask.sum())
    n_cloned = int(clone_mask.sum())

    new_color = [gmap.color_logit[clone_mask]]
    new_centers = [gmap.centers[clone_mask]]
    new_logs = [gmap.log_scales[clone_mask]]
    new_quats = [gmap.quats[clone_mask]]
    new_op = [gmap.opacity_logit[clone_mask]]

    if n_split:
        centers = gmap.centers[split_mask]
        logs = gmap.log_scales[split_mask]
        quats = gmap.quats[split_mask]
        colors = gmap.color_logit[split_mask]
        ops = gmap.opacity_logit[split_mask]
        axis_idx = logs.argmax(axis=1)
        rots = rotations_from_quats(quats)
        # Column k of the rotation matrix is local axis k in world frame.
        axes = rots[np.arange(n_split), :, axis_idx]
        offsets = axes * (np.exp(logs[np.arange(n_split), axis_idx]) / 2.0)[:, None]
        child_logs = logs - _LN2
        for sign in (1.0, -1.0):
            new_color.append(colors)
            new_centers.append(centers + sign * offsets)
            new_logs.append(child_logs)
            new_quats.append(quats)
            new_op.append(ops)
        keep = ~split_mask
        optimizer.notify_keep(keep)
        gmap.keep(keep)

    add = np.concatenate(new_centers)
    if len(add):
        # Direct concatenation: append() resets orientation to identity, and
        # clones and split children must keep the parent quaternion.
        gmap.color_logit = np.concatenate([gmap.color_logit, np.concatenate(new_color)])
        gmap.centers = np.concatenate([gmap.centers, add])
        gmap.log_scales = np.concatenate([gmap.log_scales, np.concatenate(new_logs)])
        gmap.quats = np.concatenate([gmap.quats, np.concatenate(new_quats)])
        gmap.opacity_logit = np.concatenate([gmap.opacity_logit, np.concatenate(new_op)])
        optimizer._sync()

    n_pruned = prune(gmap, cfg.opacity_floor, cfg.scale_ceiling, optimizer=optimizer)
    return n_cloned, n_split, n_pruned


def refine(
    gmap: GaussianMap,
    keyframes: list[FrameRGBD],
    iters: int,
    use_depth_loss: bool = True,
    seed: int = 0,
    cfg: RefineConfig | None = None,
    loss_cfg: LossConfig | None = None,
    raster_cfg: RasterConfig | None = None,
    stats: RefineStats | None = None,
) -> GaussianMap:
    """Extended optimization of the map against its keyframes, in place.

    Runs ``iters`` single-frame gradient steps, visiting the keyframes in a
    seeded shuffled order and reshuffling after each full pass. Every
    ``cfg.density_interval`` steps (except as the final step) runs one
    :func:`density_control` pass. With ``use_depth_loss`` off the depth term
    weight is zeroed and only photometric error drives the update.

    Pass a :class:`RefineStats` to collect per-step losses and density-control
    counts. Returns the same map object.
    """
    if not keyframes:
        raise ValueError("refine needs a nonempty keyframe list")
    if iters == 0:
        return gmap
    cfg = cfg or RefineConfig()
    lc = loss_cfg or LossConfig()
    if not use_depth_loss:
        lc = replace(lc, w_depth=0.0)
    optimizer = MapOptimizer(gmap, lc, raster_cfg)
    rng = np.random.default_rng(seed)
    stats = stats if stats is not None else RefineStats()

    order = rng.permutation(len(keyframes))
    pos = 0
    grad_accum = np.zeros(len(gmap))
    steps_since = 0
    for it in range(1, iters + 1):
        if pos == len(order):
            order = rng.permutation(len(keyframes))
            pos = 0
        frame = keyframes[order[pos]]
        pos += 1
        loss, aborted = optimizer.step(frame)
        stats.losses.append(loss)
        if aborted is not None:
            log.warning("refine: skipped non-finite %s gradient at iteration %d", aborted, it)
        else:
            grad_accum += np.linalg.norm(optimizer.last_grads["centers"], axis=1)
            steps_since += 1
        if cfg.density_interval > 0 and it % cfg.density_interval == 0 and it < iters:
            avg = grad_accum / max(steps_since, 1)
            cloned, split, pruned = density_control(gmap, optimizer, avg, cfg)
            stats.n_cloned += cloned
            stats.n_split += split
            stats.n_pruned += pruned
            log.info(
                "refine it=%d map=%d cloned=%d split=%d pruned=%d loss=%.4f",
                it, len(gmap), cloned, split, pruned, loss,
            )
            grad_accum = np.zeros(len(gmap))
            steps_since = 0
    return gmap


def keyframe_loss(
    gmap: GaussianMap,
    keyframes: list[FrameRGBD],
    loss_cfg: LossConfig | None = None,
    raster_cfg: RasterConfig | None = None,
) -> float:
    """Mean total training loss over the keyframe set, no parameter updates."""
    lc = loss_cfg or LossConfig()
    rc = raster_cfg or RasterConfig()
    total = 0.0
    for frame in keyframes:
        out = RasterWorkspace(gmap, frame.pose, frame.intrinsics, rc).forward()
        loss, _, _, _ = loss_and_render_grads(out, frame, lc)
        total += loss
    return total / len(keyframes)
