import numpy as np
import pytest

from splatmap.camera import Intrinsics, pose_from_position
from splatmap.gaussians import GaussianMap
from splatmap.losses import LossConfig
from splatmap.mapping import (
    MapOptimizer,
    MaskThresholds,
    densify,
    densify_mask,
    high_loss_mask,
    optimize_step,
    prune,
)
from splatmap.rasterizer import RasterConfig, RenderOutput, rasterize
from splatmap.simulator import FrameRGBD

INTR16 = Intrinsics.from_fov(16, 16, 90.0, 90.0)
POSE0 = pose_from_position((0.0, 0.0, 0.0), 0.0, 0.0)
THRESH = MaskThresholds()


def synthetic_pair(opacity_hat, frame_depth, depth_hat):
    """Wrap per-pixel scalars into a (1, n) render/frame pair."""
    o = np.asarray(opacity_hat, dtype=np.float64)[None, :]
    d = np.asarray(frame_depth, dtype=np.float64)[None, :]
    dh = np.asarray(depth_hat, dtype=np.float64)[None, :]
    shape = o.shape
    render = RenderOutput(
        color_hat=np.zeros(shape + (3,)),
        depth_hat=dh,
        opacity_hat=o,
        per_pixel_count=np.ones(shape, dtype=np.int64),
        final_transmittance=1.0 - o,
    )
    intr = Intrinsics.from_fov(shape[1], shape[0], 90.0, 90.0)
    frame = FrameRGBD(color=np.full(shape + (3,), 0.5), depth=d, pose=POSE0, intrinsics=intr)
    return render, frame


# eight constructed pixels; |D - D_hat| = [0, .001, .001, .002, .002, .003, .2, .3]
# so the median error is 0.002 and the gate sits at 50 * 0.002 = 0.1
DENSIFY_CASES = dict(
    opacity_hat=[0.50, 0.99, 0.99, 0.98, 0.99, 0.985, 0.99, 0.99],
    frame_depth=[2.0, 2.0, 2.001, 2.0, 2.002, 2.0, 2.0, 2.3],
    depth_hat=[2.0, 2.001, 2.0, 2.002, 2.0, 2.003, 2.2, 2.0],
)
DENSIFY_EXPECTED = [True, False, False, False, False, False, True, False]


def test_densify_mask_truth_table():
    render, frame = synthetic_pair(**DENSIFY_CASES)
    got = densify_mask(render, frame, THRESH)[0]
    assert got.tolist() == DENSIFY_EXPECTED


HIGH_LOSS_CASES = dict(
    opacity_hat=[0.9, 0.5, 0.9, 0.9, 0.8, 0.9, 0.95, 0.9],
    frame_depth=[1.0, 1.0, 1.4, 1.0, 1.0, 1.0, 2.0, 0.0],
    depth_hat=[1.4, 1.4, 1.0, 1.25, 1.4, 1.29, 2.5, 0.5],
)
HIGH_LOSS_EXPECTED = [True, False, False, False, False, False, True, False]


def test_high_loss_mask_truth_table():
    render, frame = synthetic_pair(**HIGH_LOSS_CASES)
    got = high_loss_mask(render, frame, THRESH)[0]
    assert got.tolist() == HIGH_LOSS_EXPECTED


def test_perfect_render_produces_no_work():
    n = 6
    render, frame = synthetic_pair([0.999] * n, [2.0] * n, [2.0] * n)
    assert not densify_mask(render, frame, THRESH).any()
    assert not high_loss_mask(render, frame, THRESH).any()
    gmap = GaussianMap()
    assert densify(gmap, render, frame, THRESH) == 0
    assert len(gmap) == 0


def make_frame(depth_value=2.0):
    color = np.full((16, 16, 3), 0.6)
    depth = np.full((16, 16), float(depth_value))
    return FrameRGBD(color=color, depth=depth, pose=POSE0, intrinsics=INTR16)


def test_densify_empty_map_adds_every_valid_pixel():
    gmap = GaussianMap()
    frame = make_frame()
    frame.depth[0, :4] = 0.0  # knock out four pixels
    render = rasterize(gmap, POSE0, INTR16)
    added = densify(gmap, render, frame, THRESH)
    assert added == 16 * 16 - 4
    assert len(gmap) == added
    assert np.allclose(np.linalg.norm(gmap.quats, axis=1), 1.0)
    assert np.all(gmap.scales > 0)
    assert np.allclose(gmap.opacities, 0.5)


def test_densify_cap_subsamples_evenly():
    gmap = GaussianMap()
    frame = make_frame()
    render = rasterize(gmap, POSE0, INTR16)
    added = densify(gmap, render, frame, THRESH, cap=40)
    assert added == 40
    # stride correction should scale the primitives up relative to uncapped
    uncapped = GaussianMap()
    densify(uncapped, render, frame, THRESH)
    assert gmap.scales[0, 0] > uncapped.scales[0, 0]


def test_prune_counts():
    gmap = GaussianMap()
    gmap.append(np.full((10, 3), 0.5), np.zeros((10, 3)), np.full(10, 0.05))
    gmap.opacity_logit[:] = 2.0
    # one transparent, two oversized
    gmap.opacity_logit[3] = -4.0  # sigmoid ~ 0.018
    gmap.log_scales[7, 1] = np.log(0.6)
    gmap.log_scales[9, 2] = np.log(5.0)
    assert prune(gmap) == 3
    assert len(gmap) == 7
    assert prune(gmap) == 0


def test_densify_then_prune_invariants():
    rng = np.random.default_rng(3)
    gmap = GaussianMap()
    frame = make_frame()
    frame.depth[:] = frame.depth + rng.uniform(-0.5, 0.5, frame.depth.shape)
    render = rasterize(gmap, POSE0, INTR16)
    densify(gmap, render, frame, THRESH, cap=200)
    prune(gmap)
    assert np.allclose(np.linalg.norm(gmap.quats, axis=1), 1.0, atol=1e-6)
    assert np.all(gmap.scales > 0)
    assert np.all((gmap.opacities > 0) & (gmap.opacities < 1))
    assert np.all(gmap.opacities >= 0.05)


def one_gaussian_map(color=(0.2, 0.7, 0.4)):
    gmap = GaussianMap()
    gmap.append(np.array([color]), np.array([[2.0, 0.0, 0.0]]), np.array([0.8]), opacity=0.9)
    return gmap


def test_optimize_noop_on_self_render():
    gmap = one_gaussian_map()
    out = rasterize(gmap, POSE0, INTR16)
    frame = FrameRGBD(color=out.color_hat, depth=out.depth_hat, pose=POSE0, intrinsics=INTR16)
    before = {k: getattr(gmap, k).copy() for k in ("centers", "quats", "color_logit")}
    stats = optimize_step(gmap, frame, iters=3)
    assert stats.final_loss == pytest.approx(0.0, abs=1e-9)
    for k, v in before.items():
        assert np.allclose(getattr(gmap, k), v, atol=1e-12)


def test_optimize_recovers_color():
    gmap = one_gaussian_map(color=(0.4, 0.6, 0.45))
    target = one_gaussian_map(color=(0.6, 0.4, 0.55))
    out = rasterize(target, POSE0, INTR16)
    frame = FrameRGBD(color=out.color_hat, depth=out.depth_hat, pose=POSE0, intrinsics=INTR16)
    cfg = LossConfig(w_depth=0.0)
    stats = optimize_step(gmap, frame, cfg=cfg, iters=50)
    assert stats.final_loss < 0.1 * stats.initial_loss


def test_optimize_mostly_non_increasing():
    from splatmap.scene import fixture_path, load_scene
    from splatmap.simulator import Action, SimConfig, Simulator

    scene = load_scene(fixture_path("room1"))
    sim = Simulator(scene, SimConfig(resolution=64))
    for turns in (0, 9):
        state = sim.reset()
        for _ in range(turns):
            state, _ = sim.apply_action(state, Action.TURN_LEFT)
        frame = sim.render_gt(state)
        gmap = GaussianMap()
        densify(gmap, rasterize(gmap, frame.pose, frame.intrinsics), frame, THRESH, cap=1500)
        stats = optimize_step(gmap, frame, iters=15)
        losses = np.array(stats.losses)
        assert np.mean(np.diff(losses) <= 1e-9) >= 0.9
        assert stats.final_loss < stats.initial_loss


def test_optimize_aborts_on_non_finite():
    gmap = one_gaussian_map()
    frame = make_frame()
    gmap.color_logit[0, 0] = np.nan
    before = gmap.opacity_logit.copy()
    stats = optimize_step(gmap, frame, iters=5)
    assert stats.aborted_group in ("centers", "log_scales", "quats", "opacity_logit", "color_logit")
    assert np.array_equal(gmap.opacity_logit, before)


def test_optimizer_state_tracks_growth_and_pruning():
    gmap = one_gaussian_map()
    opt = MapOptimizer(gmap)
    frame = make_frame()
    opt.step(frame)
    gmap.append(np.full((2, 3), 0.5), np.array([[2.0, 0.5, 0.0], [2.0, -0.5, 0.0]]), np.full(2, 0.1))
    opt.step(frame)
    assert opt._m["centers"].shape == (3, 3)
    gmap.opacity_logit[0] = -6.0
    prune(gmap, optimizer=opt)
    assert len(gmap) == 2
    assert opt._m["centers"].shape == (2, 3)
    loss, aborted = opt.step(frame)
    assert aborted is None and np.isfinite(loss)
