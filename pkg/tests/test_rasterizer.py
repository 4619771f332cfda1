import numpy as np
import pytest

from splatmap.camera import Intrinsics, pose_from_position
from splatmap.gaussians import GaussianMap, logit
from splatmap.rasterizer import RasterConfig, RasterWorkspace, rasterize

from oracles import random_gaussian_scene, reference_render

INTR32 = Intrinsics.from_fov(32, 32, 90.0, 90.0)
POSE0 = pose_from_position((0.0, 0.0, 0.0), 0.0, 0.0)


def build_map(colors, centers, log_scales, quats, opacities):
    gmap = GaussianMap()
    gmap.color_logit = logit(np.asarray(colors, dtype=np.float64))
    gmap.centers = np.asarray(centers, dtype=np.float64)
    gmap.log_scales = np.asarray(log_scales, dtype=np.float64)
    gmap.quats = np.asarray(quats, dtype=np.float64)
    gmap.opacity_logit = logit(np.asarray(opacities, dtype=np.float64))
    return gmap


def test_empty_map_renders_zeros():
    out = rasterize(GaussianMap(), POSE0, INTR32)
    assert np.all(out.color_hat == 0.0)
    assert np.all(out.depth_hat == 0.0)
    assert np.all(out.opacity_hat == 0.0)
    assert np.all(out.per_pixel_count == 0)


def test_single_opaque_gaussian_saturates_center():
    gmap = build_map(
        [[0.9, 0.2, 0.1]], [[2.0, 0.0, 0.0]], np.log([[2.0, 2.0, 2.0]]),
        [[1.0, 0.0, 0.0, 0.0]], [1.0 - 1e-9],
    )
    out = rasterize(gmap, POSE0, INTR32)
    assert out.opacity_hat[16, 16] >= 0.99
    assert out.per_pixel_count[16, 16] == 1
    assert abs(out.depth_hat[16, 16] - 2.0 * out.opacity_hat[16, 16]) < 1e-6


def test_matches_untruncated_reference_on_random_scenes():
    rng = np.random.default_rng(42)
    for _ in range(20):
        n = int(rng.integers(1, 21))
        colors, centers, log_scales, quats, opacities = random_gaussian_scene(rng, n)
        gmap = build_map(colors, centers, log_scales, quats, opacities)
        out = rasterize(gmap, POSE0, INTR32)
        ref_c, ref_d, ref_o, _ = reference_render(
            colors, centers, log_scales, quats, opacities, POSE0, INTR32)
        assert np.max(np.abs(out.color_hat - ref_c)) <= 2e-3
        assert np.max(np.abs(out.depth_hat - ref_d)) <= 1e-3
        assert np.max(np.abs(out.opacity_hat - ref_o)) <= 1e-3


def test_compositing_weights_sum_to_opacity():
    rng = np.random.default_rng(7)
    colors, centers, log_scales, quats, opacities = random_gaussian_scene(rng, 12)
    gmap = build_map(colors, centers, log_scales, quats, opacities)
    out = rasterize(gmap, POSE0, INTR32)
    # internal identity: accumulated alpha + final transmittance telescope to 1
    assert np.max(np.abs(out.opacity_hat - (1.0 - out.final_transmittance))) < 1e-6
    # reference identity: per-pixel sum of f_i * prod(1 - f_j) equals its opacity
    _, _, ref_o, contribs = reference_render(
        colors, centers, log_scales, quats, opacities, POSE0, INTR32)
    for r in range(0, 32, 5):
        for c in range(0, 32, 5):
            fs = contribs[r][c]
            t = 1.0
            total = 0.0
            for f in fs:
                total += f * t
                t *= 1.0 - f
            assert abs(total - ref_o[r, c]) < 1e-6


def test_depth_sorting_front_to_back():
    # a red wall in front of a blue wall: the red one must dominate
    gmap = build_map(
        [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
        [[2.0, 0.0, 0.0], [3.0, 0.0, 0.0]],
        np.log([[0.8, 0.8, 0.8], [0.8, 0.8, 0.8]]),
        [[1.0, 0.0, 0.0, 0.0]] * 2,
        [0.9, 0.9],
    )
    out = rasterize(gmap, POSE0, INTR32)
    assert out.color_hat[16, 16, 0] > 5 * out.color_hat[16, 16, 2]


def test_equal_depth_ties_break_by_insertion_index():
    common = dict(
        log_scales=np.log([[0.5, 0.5, 0.5], [0.5, 0.5, 0.5]]),
        quats=[[1.0, 0.0, 0.0, 0.0]] * 2,
        opacities=[0.9, 0.9],
    )
    a = build_map([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
                  [[2.0, 0.0, 0.0], [2.0, 0.0, 0.0]], **common)
    b = build_map([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]],
                  [[2.0, 0.0, 0.0], [2.0, 0.0, 0.0]], **common)
    out_a = rasterize(a, POSE0, INTR32)
    out_b = rasterize(b, POSE0, INTR32)
    # first-inserted wins the front slot in both cases
    assert out_a.color_hat[16, 16, 0] > out_a.color_hat[16, 16, 2]
    assert out_b.color_hat[16, 16, 2] > out_b.color_hat[16, 16, 0]


def test_behind_camera_gaussians_are_culled():
    gmap = build_map([[0.5, 0.5, 0.5]], [[-2.0, 0.0, 0.0]],
                     np.log([[0.3, 0.3, 0.3]]), [[1.0, 0.0, 0.0, 0.0]], [0.9])
    out = rasterize(gmap, POSE0, INTR32)
    assert np.all(out.per_pixel_count == 0)


def test_fixed_footprint_mode_stays_close():
    rng = np.random.default_rng(3)
    colors, centers, log_scales, quats, opacities = random_gaussian_scene(rng, 10)
    gmap = build_map(colors, centers, log_scales, quats, opacities)
    out_fixed = rasterize(gmap, POSE0, INTR32, RasterConfig(footprint_sigma=3.0))
    ref_c, _, _, _ = reference_render(colors, centers, log_scales, quats, opacities, POSE0, INTR32)
    # 3-sigma truncation is the documented fast mode; it may deviate more than
    # the adaptive default but must stay visually equivalent
    assert np.max(np.abs(out_fixed.color_hat - ref_c)) < 3e-2
