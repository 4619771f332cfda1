"""Differentiable Gaussian-splat rasterizer.

Forward: each primitive's 3D covariance (built from log-scales and a unit
quaternion) is pushed through the first-order perspective projection
(camera-frame Jacobian), giving a 2D Gaussian with an added isotropic low-pass
term; per pixel, samples are alpha-composited front to back, producing color,
z-depth, accumulated opacity and a contribution count per pixel.

Backward: hand-derived reverse-mode chain through the compositing (prefix
transmittances and suffix sums), the conic quadratic form, the projection, the
covariance factorization and the sigmoid/log parametrizations. Gradients are
exact for the computation the forward pass actually performed (same skip and
early-termination branches).

The default footprint radius adapts per primitive so that every contribution
above `f_cut` is rasterized (never less than 3 sigma); setting
`footprint_sigma` fixes the radius in sigma units instead, which is cheaper
and is what the online mapping config uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .camera import Intrinsics, invert_pose


@dataclass
class RasterConfig:
    blur: float = 0.3            # isotropic low-pass added to projected covariance (px^2)
    alpha_clamp: float = 0.995
    t_floor: float = 1e-4        # stop compositing when transmittance drops below
    e_floor: float = -18.0       # skip samples whose Gaussian exponent is below
    footprint_sigma: float = 0.0  # fixed truncation radius in sigmas; <= 0 means adaptive
    f_cut: float = 5e-5          # adaptive radius keeps contributions above this alpha
    znear: float = 0.05
    tile: int = 8


@dataclass
class RenderOutput:
    color_hat: np.ndarray       # (H, W, 3)
    depth_hat: np.ndarray       # (H, W), 0 where nothing rendered
    opacity_hat: np.ndarray     # (H, W) accumulated alpha
    per_pixel_count: np.ndarray  # (H, W) int32 composited samples
    final_transmittance: np.ndarray  # (H, W)


@njit(cache=True)
def _project_kernel(centers, log_scales, quats, opac, rwc, twc,
                    fx, fy, cx, cy, width, height,
                    blur, fixed_k, f_cut, znear,
                    valid, depth, mean2, conic, bbox):
    n = centers.shape[0]
    for g in range(n):
        valid[g] = False
        mx_ = centers[g, 0]
        my_ = centers[g, 1]
        mz_ = centers[g, 2]
        tx = rwc[0, 0] * mx_ + rwc[0, 1] * my_ + rwc[0, 2] * mz_ + twc[0]
        ty = rwc[1, 0] * mx_ + rwc[1, 1] * my_ + rwc[1, 2] * mz_ + twc[1]
        tz = rwc[2, 0] * mx_ + rwc[2, 1] * my_ + rwc[2, 2] * mz_ + twc[2]
        if tz <= znear:
            continue
        o = opac[g]
        if fixed_k <= 0.0 and o <= f_cut:
            continue

        qw = quats[g, 0]
        qx = quats[g, 1]
        qy = quats[g, 2]
        qz = quats[g, 3]
        qn = math.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
        if qn < 1e-12:
            continue
        qw /= qn
        qx /= qn
        qy /= qn
        qz /= qn
        r00 = 1.0 - 2.0 * (qy * qy + qz * qz)
        r01 = 2.0 * (qx * qy - qw * qz)
        r02 = 2.0 * (qx * qz + qw * qy)
        r10 = 2.0 * (qx * qy + qw * qz)
        r11 = 1.0 - 2.0 * (qx * qx + qz * qz)
        r12 = 2.0 * (qy * qz - qw * qx)
        r20 = 2.0 * (qx * qz - qw * qy)
        r21 = 2.0 * (qy * qz + qw * qx)
        r22 = 1.0 - 2.0 * (qx * qx + qy * qy)

        s0 = math.exp(log_scales[g, 0])
        s1 = math.exp(log_scales[g, 1])
        s2 = math.exp(log_scales[g, 2])
        # M = R diag(s); Sigma = M M^T
        m00 = r00 * s0
        m01 = r01 * s1
        m02 = r02 * s2
        m10 = r10 * s0
        m11 = r11 * s1
        m12 = r12 * s2
        m20 = r20 * s0
        m21 = r21 * s1
        m22 = r22 * s2
        s3_00 = m00 * m00 + m01 * m01 + m02 * m02
        s3_01 = m00 * m10 + m01 * m11 + m02 * m12
        s3_02 = m00 * m20 + m01 * m21 + m02 * m22
        s3_11 = m10 * m10 + m11 * m11 + m12 * m12
        s3_12 = m10 * m20 + m11 * m21 + m12 * m22
        s3_22 = m20 * m20 + m21 * m21 + m22 * m22

        inv_tz = 1.0 / tz
        j00 = fx * inv_tz
        j02 = -fx * tx * inv_tz * inv_tz
        j11 = fy * inv_tz
        j12 = -fy * ty * inv_tz * inv_tz
        # A = J @ Rwc (2x3)
        a00 = j00 * rwc[0, 0] + j02 * rwc[2, 0]
        a01 = j00 * rwc[0, 1] + j02 * rwc[2, 1]
        a02 = j00 * rwc[0, 2] + j02 * rwc[2, 2]
        a10 = j11 * rwc[1, 0] + j12 * rwc[2, 0]
        a11 = j11 * rwc[1, 1] + j12 * rwc[2, 1]
        a12 = j11 * rwc[1, 2] + j12 * rwc[2, 2]
        # C2 = A Sigma A^T + blur I
        b00 = a00 * s3_00 + a01 * s3_01 + a02 * s3_02
        b01 = a00 * s3_01 + a01 * s3_11 + a02 * s3_12
        b02 = a00 * s3_02 + a01 * s3_12 + a02 * s3_22
        b10 = a10 * s3_00 + a11 * s3_01 + a12 * s3_02
        b11 = a10 * s3_01 + a11 * s3_11 + a12 * s3_12
        b12 = a10 * s3_02 + a11 * s3_12 + a12 * s3_22
        c00 = b00 * a00 + b01 * a01 + b02 * a02 + blur
        c01 = b00 * a10 + b01 * a11 + b02 * a12
        c11 = b10 * a10 + b11 * a11 + b12 * a12 + blur
        det = c00 * c11 - c01 * c01
        if det <= 1e-12:
            continue
        inv_det = 1.0 / det
        qa = c11 * inv_det
        qb = -c01 * inv_det
        qc = c00 * inv_det

        mid = 0.5 * (c00 + c11)
        disc = mid * mid - det
        if disc < 0.0:
            disc = 0.0
        lam = mid + math.sqrt(disc)
        if fixed_k > 0.0:
            k = fixed_k
        else:
            k = math.sqrt(2.0 * math.log(o / f_cut))
            if k < 3.0:
                k = 3.0
        rad = k * math.sqrt(lam)

        mu = fx * tx * inv_tz + cx
        mv = fy * ty * inv_tz + cy
        x0 = int(math.floor(mu - rad))
        x1 = int(math.floor(mu + rad)) + 1
        y0 = int(math.floor(mv - rad))
        y1 = int(math.floor(mv + rad)) + 1
        if x0 < 0:
            x0 = 0
        if y0 < 0:
            y0 = 0
        if x1 > width:
            x1 = width
        if y1 > height:
            y1 = height
        if x0 >= x1 or y0 >= y1:
            continue

        valid[g] = True
        depth[g] = tz
        mean2[g, 0] = mu
        mean2[g, 1] = mv
        conic[g, 0] = qa
        conic[g, 1] = qb
        conic[g, 2] = qc
        bbox[g, 0] = x0
        bbox[g, 1] = x1
        bbox[g, 2] = y0
        bbox[g, 3] = y1


@njit(cache=True)
def _count_tiles(order, bbox, tile, ntx, counts):
    for k in range(order.shape[0]):
        g = order[k]
        tx0 = bbox[g, 0] // tile
        tx1 = (bbox[g, 1] - 1) // tile
        ty0 = bbox[g, 2] // tile
        ty1 = (bbox[g, 3] - 1) // tile
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                counts[ty * ntx + tx] += 1


@njit(cache=True)
def _fill_tiles(order, bbox, tile, ntx, slots, entries):
    for k in range(order.shape[0]):
        g = order[k]
        tx0 = bbox[g, 0] // tile
        tx1 = (bbox[g, 1] - 1) // tile
        ty0 = bbox[g, 2] // tile
        ty1 = (bbox[g, 3] - 1) // tile
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                t = ty * ntx + tx
                entries[slots[t]] = g
                slots[t] += 1


@njit(cache=True)
def _forward_kernel(entries, tile_ptr, mean2, conic, bbox, colors, opac, depth,
                    width, height, tile, ntx, nty,
                    alpha_clamp, t_floor, e_floor,
                    out_c, out_d, out_o, out_cnt, out_t):
    for t in range(ntx * nty):
        lo = tile_ptr[t]
        hi = tile_ptr[t + 1]
        ty = t // ntx
        tx = t % ntx
        y_end = min((ty + 1) * tile, height)
        x_end = min((tx + 1) * tile, width)
        for py in range(ty * tile, y_end):
            vy = py + 0.5
            for px in range(tx * tile, x_end):
                vx = px + 0.5
                acc_r = 0.0
                acc_g = 0.0
                acc_b = 0.0
                acc_d = 0.0
                acc_o = 0.0
                trans = 1.0
                cnt = 0
                for e in range(lo, hi):
                    g = entries[e]
                    if px < bbox[g, 0] or px >= bbox[g, 1] or py < bbox[g, 2] or py >= bbox[g, 3]:
                        continue
                    dx = vx - mean2[g, 0]
                    dy = vy - mean2[g, 1]
                    ee = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                    if ee < e_floor:
                        continue
                    f = opac[g] * math.exp(ee)
                    if f > alpha_clamp:
                        f = alpha_clamp
                    w = f * trans
                    acc_r += w * colors[g, 0]
                    acc_g += w * colors[g, 1]
                    acc_b += w * colors[g, 2]
                    acc_d += w * depth[g]
                    acc_o += w
                    cnt += 1
                    trans *= 1.0 - f
                    if trans < t_floor:
                        break
                out_c[py, px, 0] = acc_r
                out_c[py, px, 1] = acc_g
                out_c[py, px, 2] = acc_b
                out_d[py, px] = acc_d
                out_o[py, px] = acc_o
                out_cnt[py, px] = cnt
                out_t[py, px] = trans


@njit(cache=True)
def _forward_od_kernel(entries, tile_ptr, mean2, conic, bbox, opac, depth,
                       width, height, tile, ntx, nty,
                       alpha_clamp, t_floor, e_floor,
                       out_d, out_o, out_cnt):
    for t in range(ntx * nty):
        lo = tile_ptr[t]
        hi = tile_ptr[t + 1]
        ty = t // ntx
        tx = t % ntx
        y_end = min((ty + 1) * tile, height)
        x_end = min((tx + 1) * tile, width)
        for py in range(ty * tile, y_end):
            vy = py + 0.5
            for px in range(tx * tile, x_end):
                vx = px + 0.5
                acc_d = 0.0
                acc_o = 0.0
                trans = 1.0
                cnt = 0
                for e in range(lo, hi):
                    g = entries[e]
                    if px < bbox[g, 0] or px >= bbox[g, 1] or py < bbox[g, 2] or py >= bbox[g, 3]:
                        continue
                    dx = vx - mean2[g, 0]
                    dy = vy - mean2[g, 1]
                    ee = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                    if ee < e_floor:
                        continue
                    f = opac[g] * math.exp(ee)
                    if f > alpha_clamp:
                        f = alpha_clamp
                    w = f * trans
                    acc_d += w * depth[g]
                    acc_o += w
                    cnt += 1
                    trans *= 1.0 - f
                    if trans < t_floor:
                        break
                out_d[py, px] = acc_d
                out_o[py, px] = acc_o
                out_cnt[py, px] = cnt


@njit(cache=True)
def _backward_kernel(entries, tile_ptr, mean2, conic, bbox, colors, opac, depth,
                     width, height, tile, ntx, nty,
                     alpha_clamp, t_floor, e_floor,
                     d_color, d_depth, d_opac_img,
                     g_mean2, g_conic, g_color, g_opac, g_depth):
    for t in range(ntx * nty):
        lo = tile_ptr[t]
        hi = tile_ptr[t + 1]
        ty = t // ntx
        tx = t % ntx
        y_end = min((ty + 1) * tile, height)
        x_end = min((tx + 1) * tile, width)
        for py in range(ty * tile, y_end):
            vy = py + 0.5
            for px in range(tx * tile, x_end):
                vx = px + 0.5
                dc0 = d_color[py, px, 0]
                dc1 = d_color[py, px, 1]
                dc2 = d_color[py, px, 2]
                dd = d_depth[py, px]
                do_ = d_opac_img[py, px]
                if dc0 == 0.0 and dc1 == 0.0 and dc2 == 0.0 and dd == 0.0 and do_ == 0.0:
                    continue
                # first walk: total weighted upstream signal
                trans = 1.0
                phi_tot = 0.0
                for e in range(lo, hi):
                    g = entries[e]
                    if px < bbox[g, 0] or px >= bbox[g, 1] or py < bbox[g, 2] or py >= bbox[g, 3]:
                        continue
                    dx = vx - mean2[g, 0]
                    dy = vy - mean2[g, 1]
                    ee = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                    if ee < e_floor:
                        continue
                    f = opac[g] * math.exp(ee)
                    if f > alpha_clamp:
                        f = alpha_clamp
                    phi = dc0 * colors[g, 0] + dc1 * colors[g, 1] + dc2 * colors[g, 2] + dd * depth[g] + do_
                    phi_tot += f * trans * phi
                    trans *= 1.0 - f
                    if trans < t_floor:
                        break
                # second walk: per-sample gradients using suffix sums
                trans = 1.0
                prefix = 0.0
                for e in range(lo, hi):
                    g = entries[e]
                    if px < bbox[g, 0] or px >= bbox[g, 1] or py < bbox[g, 2] or py >= bbox[g, 3]:
                        continue
                    dx = vx - mean2[g, 0]
                    dy = vy - mean2[g, 1]
                    ee = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                    if ee < e_floor:
                        continue
                    expe = math.exp(ee)
                    f = opac[g] * expe
                    clamped = False
                    if f > alpha_clamp:
                        f = alpha_clamp
                        clamped = True
                    w = f * trans
                    phi = dc0 * colors[g, 0] + dc1 * colors[g, 1] + dc2 * colors[g, 2] + dd * depth[g] + do_
                    wphi = w * phi
                    prefix += wphi
                    suffix = phi_tot - prefix
                    dldf = trans * phi - suffix / (1.0 - f)
                    g_color[g, 0] += dc0 * w
                    g_color[g, 1] += dc1 * w
                    g_color[g, 2] += dc2 * w
                    g_depth[g] += dd * w
                    if not clamped:
                        g_opac[g] += dldf * expe
                        dlde = dldf * f
                        g_conic[g, 0] += dlde * (-0.5 * dx * dx)
                        g_conic[g, 1] += dlde * (-dx * dy)
                        g_conic[g, 2] += dlde * (-0.5 * dy * dy)
                        g_mean2[g, 0] += dlde * (conic[g, 0] * dx + conic[g, 1] * dy)
                        g_mean2[g, 1] += dlde * (conic[g, 1] * dx + conic[g, 2] * dy)
                    trans *= 1.0 - f
                    if trans < t_floor:
                        break


@njit(cache=True)
def _geometry_backward_kernel(centers, log_scales, quats, opac, colors,
                              rwc, twc, fx, fy,
                              valid, conic,
                              g_mean2, g_conic, g_color, g_opac, g_depth,
                              out_centers, out_log_scales, out_quats,
                              out_opac_logit, out_color_logit, znear):
    n = centers.shape[0]
    for g in range(n):
        if not valid[g]:
            continue
        tx = rwc[0, 0] * centers[g, 0] + rwc[0, 1] * centers[g, 1] + rwc[0, 2] * centers[g, 2] + twc[0]
        ty = rwc[1, 0] * centers[g, 0] + rwc[1, 1] * centers[g, 1] + rwc[1, 2] * centers[g, 2] + twc[1]
        tz = rwc[2, 0] * centers[g, 0] + rwc[2, 1] * centers[g, 1] + rwc[2, 2] * centers[g, 2] + twc[2]

        qw = quats[g, 0]
        qx = quats[g, 1]
        qy = quats[g, 2]
        qz = quats[g, 3]
        qnorm = math.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
        w = qw / qnorm
        x = qx / qnorm
        y = qy / qnorm
        z = qz / qnorm
        r00 = 1.0 - 2.0 * (y * y + z * z)
        r01 = 2.0 * (x * y - w * z)
        r02 = 2.0 * (x * z + w * y)
        r10 = 2.0 * (x * y + w * z)
        r11 = 1.0 - 2.0 * (x * x + z * z)
        r12 = 2.0 * (y * z - w * x)
        r20 = 2.0 * (x * z - w * y)
        r21 = 2.0 * (y * z + w * x)
        r22 = 1.0 - 2.0 * (x * x + y * y)

        s0 = math.exp(log_scales[g, 0])
        s1 = math.exp(log_scales[g, 1])
        s2 = math.exp(log_scales[g, 2])
        m00 = r00 * s0
        m01 = r01 * s1
        m02 = r02 * s2
        m10 = r10 * s0
        m11 = r11 * s1
        m12 = r12 * s2
        m20 = r20 * s0
        m21 = r21 * s1
        m22 = r22 * s2
        s3_00 = m00 * m00 + m01 * m01 + m02 * m02
        s3_01 = m00 * m10 + m01 * m11 + m02 * m12
        s3_02 = m00 * m20 + m01 * m21 + m02 * m22
        s3_11 = m10 * m10 + m11 * m11 + m12 * m12
        s3_12 = m10 * m20 + m11 * m21 + m12 * m22
        s3_22 = m20 * m20 + m21 * m21 + m22 * m22

        inv_tz = 1.0 / tz
        inv_tz2 = inv_tz * inv_tz
        j00 = fx * inv_tz
        j02 = -fx * tx * inv_tz2
        j11 = fy * inv_tz
        j12 = -fy * ty * inv_tz2
        a00 = j00 * rwc[0, 0] + j02 * rwc[2, 0]
        a01 = j00 * rwc[0, 1] + j02 * rwc[2, 1]
        a02 = j00 * rwc[0, 2] + j02 * rwc[2, 2]
        a10 = j11 * rwc[1, 0] + j12 * rwc[2, 0]
        a11 = j11 * rwc[1, 1] + j12 * rwc[2, 1]
        a12 = j11 * rwc[1, 2] + j12 * rwc[2, 2]

        qa = conic[g, 0]
        qb = conic[g, 1]
        qc = conic[g, 2]
        # gradient w.r.t. conic as a symmetric matrix
        ga = g_conic[g, 0]
        gb = 0.5 * g_conic[g, 1]
        gc = g_conic[g, 2]
        # d Sigma2 = -Q Qg Q
        t00 = qa * ga + qb * gb
        t01 = qa * gb + qb * gc
        t10 = qb * ga + qc * gb
        t11 = qb * gb + qc * gc
        sg00 = -(t00 * qa + t01 * qb)
        sg01 = -(t00 * qb + t01 * qc)
        sg11 = -(t10 * qb + t11 * qc)

        # Ag = 2 * S2g @ A @ Sigma
        p00 = sg00 * a00 + sg01 * a10
        p01 = sg00 * a01 + sg01 * a11
        p02 = sg00 * a02 + sg01 * a12
        p10 = sg01 * a00 + sg11 * a10
        p11 = sg01 * a01 + sg11 * a11
        p12 = sg01 * a02 + sg11 * a12
        ag00 = 2.0 * (p00 * s3_00 + p01 * s3_01 + p02 * s3_02)
        ag01 = 2.0 * (p00 * s3_01 + p01 * s3_11 + p02 * s3_12)
        ag02 = 2.0 * (p00 * s3_02 + p01 * s3_12 + p02 * s3_22)
        ag10 = 2.0 * (p10 * s3_00 + p11 * s3_01 + p12 * s3_02)
        ag11 = 2.0 * (p10 * s3_01 + p11 * s3_11 + p12 * s3_12)
        ag12 = 2.0 * (p10 * s3_02 + p11 * s3_12 + p12 * s3_22)

        # Sigma grad = A^T S2g A
        sgm00 = a00 * sg00 * a00 + a00 * sg01 * a10 + a10 * sg01 * a00 + a10 * sg11 * a10
        sgm01 = a00 * sg00 * a01 + a00 * sg01 * a11 + a10 * sg01 * a01 + a10 * sg11 * a11
        sgm02 = a00 * sg00 * a02 + a00 * sg01 * a12 + a10 * sg01 * a02 + a10 * sg11 * a12
        sgm11 = a01 * sg00 * a01 + a01 * sg01 * a11 + a11 * sg01 * a01 + a11 * sg11 * a11
        sgm12 = a01 * sg00 * a02 + a01 * sg01 * a12 + a11 * sg01 * a02 + a11 * sg11 * a12
        sgm22 = a02 * sg00 * a02 + a02 * sg01 * a12 + a12 * sg01 * a02 + a12 * sg11 * a12

        # J grad = Ag @ Rwc^T
        jg00 = ag00 * rwc[0, 0] + ag01 * rwc[0, 1] + ag02 * rwc[0, 2]
        jg02 = ag00 * rwc[2, 0] + ag01 * rwc[2, 1] + ag02 * rwc[2, 2]
        jg11 = ag10 * rwc[1, 0] + ag11 * rwc[1, 1] + ag12 * rwc[1, 2]
        jg12 = ag10 * rwc[2, 0] + ag11 * rwc[2, 1] + ag12 * rwc[2, 2]

        gmu = g_mean2[g, 0]
        gmv = g_mean2[g, 1]
        tgx = gmu * fx * inv_tz + jg02 * (-fx * inv_tz2)
        tgy = gmv * fy * inv_tz + jg12 * (-fy * inv_tz2)
        tgz = (-gmu * fx * tx * inv_tz2 - gmv * fy * ty * inv_tz2
               + g_depth[g]
               + jg00 * (-fx * inv_tz2) + jg11 * (-fy * inv_tz2)
               + jg02 * (2.0 * fx * tx * inv_tz2 * inv_tz)
               + jg12 * (2.0 * fy * ty * inv_tz2 * inv_tz))
        out_centers[g, 0] = rwc[0, 0] * tgx + rwc[1, 0] * tgy + rwc[2, 0] * tgz
        out_centers[g, 1] = rwc[0, 1] * tgx + rwc[1, 1] * tgy + rwc[2, 1] * tgz
        out_centers[g, 2] = rwc[0, 2] * tgx + rwc[1, 2] * tgy + rwc[2, 2] * tgz

        # M grad = 2 Sigma_grad M
        mg00 = 2.0 * (sgm00 * m00 + sgm01 * m10 + sgm02 * m20)
        mg01 = 2.0 * (sgm00 * m01 + sgm01 * m11 + sgm02 * m21)
        mg02 = 2.0 * (sgm00 * m02 + sgm01 * m12 + sgm02 * m22)
        mg10 = 2.0 * (sgm01 * m00 + sgm11 * m10 + sgm12 * m20)
        mg11 = 2.0 * (sgm01 * m01 + sgm11 * m11 + sgm12 * m21)
        mg12 = 2.0 * (sgm01 * m02 + sgm11 * m12 + sgm12 * m22)
        mg20 = 2.0 * (sgm02 * m00 + sgm12 * m10 + sgm22 * m20)
        mg21 = 2.0 * (sgm02 * m01 + sgm12 * m11 + sgm22 * m21)
        mg22 = 2.0 * (sgm02 * m02 + sgm12 * m12 + sgm22 * m22)

        out_log_scales[g, 0] = (r00 * mg00 + r10 * mg10 + r20 * mg20) * s0
        out_log_scales[g, 1] = (r01 * mg01 + r11 * mg11 + r21 * mg21) * s1
        out_log_scales[g, 2] = (r02 * mg02 + r12 * mg12 + r22 * mg22) * s2

        # R grad = Mg diag(s)
        rg00 = mg00 * s0
        rg01 = mg01 * s1
        rg02 = mg02 * s2
        rg10 = mg10 * s0
        rg11 = mg11 * s1
        rg12 = mg12 * s2
        rg20 = mg20 * s0
        rg21 = mg21 * s1
        rg22 = mg22 * s2

        gw = (rg01 * (-2.0 * z) + rg02 * (2.0 * y)
              + rg10 * (2.0 * z) + rg12 * (-2.0 * x)
              + rg20 * (-2.0 * y) + rg21 * (2.0 * x))
        gx = (rg01 * (2.0 * y) + rg02 * (2.0 * z)
              + rg10 * (2.0 * y) + rg11 * (-4.0 * x) + rg12 * (-2.0 * w)
              + rg20 * (2.0 * z) + rg21 * (2.0 * w) + rg22 * (-4.0 * x))
        gy = (rg00 * (-4.0 * y) + rg01 * (2.0 * x) + rg02 * (2.0 * w)
              + rg10 * (2.0 * x) + rg12 * (2.0 * z)
              + rg20 * (-2.0 * w) + rg21 * (2.0 * z) + rg22 * (-4.0 * y))
        gz = (rg00 * (-4.0 * z) + rg01 * (-2.0 * w) + rg02 * (2.0 * x)
              + rg10 * (2.0 * w) + rg11 * (-4.0 * z) + rg12 * (2.0 * y)
              + rg20 * (2.0 * x) + rg21 * (2.0 * y))
        dot = w * gw + x * gx + y * gy + z * gz
        out_quats[g, 0] = (gw - w * dot) / qnorm
        out_quats[g, 1] = (gx - x * dot) / qnorm
        out_quats[g, 2] = (gy - y * dot) / qnorm
        out_quats[g, 3] = (gz - z * dot) / qnorm

        o = opac[g]
        out_opac_logit[g] = g_opac[g] * o * (1.0 - o)
        out_color_logit[g, 0] = g_color[g, 0] * colors[g, 0] * (1.0 - colors[g, 0])
        out_color_logit[g, 1] = g_color[g, 1] * colors[g, 1] * (1.0 - colors[g, 1])
        out_color_logit[g, 2] = g_color[g, 2] * colors[g, 2] * (1.0 - colors[g, 2])


class RasterWorkspace:
    """Projects a map once for a given pose and serves forward/backward passes."""

    def __init__(self, gmap, pose: np.ndarray, intr: Intrinsics, cfg: RasterConfig | None = None):
        self.cfg = cfg or RasterConfig()
        self.intr = intr
        self.gmap = gmap
        w2c = invert_pose(pose)
        self._rwc = np.ascontiguousarray(w2c[:3, :3])
        self._twc = np.ascontiguousarray(w2c[:3, 3])
        n = len(gmap)
        self.colors = gmap.colors
        self.opacities = gmap.opacities
        self.valid = np.zeros(n, dtype=np.bool_)
        self.depth = np.zeros(n)
        self.mean2 = np.zeros((n, 2))
        self.conic = np.zeros((n, 3))
        self.bbox = np.zeros((n, 4), dtype=np.int32)
        fixed_k = self.cfg.footprint_sigma if self.cfg.footprint_sigma and self.cfg.footprint_sigma > 0 else 0.0
        if n:
            _project_kernel(
                gmap.centers, gmap.log_scales, gmap.quats, self.opacities,
                self._rwc, self._twc,
                intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height,
                self.cfg.blur, fixed_k, self.cfg.f_cut, self.cfg.znear,
                self.valid, self.depth, self.mean2, self.conic, self.bbox,
            )
        idx = np.flatnonzero(self.valid)
        order = idx[np.argsort(self.depth[idx], kind="stable")].astype(np.int64)
        tile = self.cfg.tile
        self._ntx = (intr.width + tile - 1) // tile
        self._nty = (intr.height + tile - 1) // tile
        ntiles = self._ntx * self._nty
        counts = np.zeros(ntiles, dtype=np.int64)
        if order.size:
            _count_tiles(order, self.bbox, tile, self._ntx, counts)
        self.tile_ptr = np.zeros(ntiles + 1, dtype=np.int64)
        np.cumsum(counts, out=self.tile_ptr[1:])
        self.entries = np.zeros(int(self.tile_ptr[-1]), dtype=np.int64)
        if order.size:
            slots = self.tile_ptr[:-1].copy()
            _fill_tiles(order, self.bbox, tile, self._ntx, slots, self.entries)

    def forward(self) -> RenderOutput:
        intr, cfg = self.intr, self.cfg
        h, w = intr.height, intr.width
        out_c = np.zeros((h, w, 3))
        out_d = np.zeros((h, w))
        out_o = np.zeros((h, w))
        out_cnt = np.zeros((h, w), dtype=np.int32)
        out_t = np.ones((h, w))
        _forward_kernel(
            self.entries, self.tile_ptr, self.mean2, self.conic, self.bbox,
            self.colors, self.opacities, self.depth,
            w, h, cfg.tile, self._ntx, self._nty,
            cfg.alpha_clamp, cfg.t_floor, cfg.e_floor,
            out_c, out_d, out_o, out_cnt, out_t,
        )
        return RenderOutput(out_c, out_d, out_o, out_cnt, out_t)

    def forward_opacity_depth(self):
        intr, cfg = self.intr, self.cfg
        h, w = intr.height, intr.width
        out_d = np.zeros((h, w))
        out_o = np.zeros((h, w))
        out_cnt = np.zeros((h, w), dtype=np.int32)
        _forward_od_kernel(
            self.entries, self.tile_ptr, self.mean2, self.conic, self.bbox,
            self.opacities, self.depth,
            w, h, cfg.tile, self._ntx, self._nty,
            cfg.alpha_clamp, cfg.t_floor, cfg.e_floor,
            out_d, out_o, out_cnt,
        )
        return out_o, out_d, out_cnt

    def backward(self, d_color, d_depth, d_opacity=None) -> dict:
        """Gradients of the rendered images w.r.t. the map parameters.

        Returns arrays keyed 'centers', 'log_scales', 'quats', 'opacity_logit',
        'color_logit', matching the map's parametrization.
        """
        intr, cfg = self.intr, self.cfg
        n = len(self.gmap)
        h, w = intr.height, intr.width
        if d_opacity is None:
            d_opacity = np.zeros((h, w))
        g_mean2 = np.zeros((n, 2))
        g_conic = np.zeros((n, 3))
        g_color = np.zeros((n, 3))
        g_opac = np.zeros(n)
        g_depth = np.zeros(n)
        _backward_kernel(
            self.entries, self.tile_ptr, self.mean2, self.conic, self.bbox,
            self.colors, self.opacities, self.depth,
            w, h, cfg.tile, self._ntx, self._nty,
            cfg.alpha_clamp, cfg.t_floor, cfg.e_floor,
            np.ascontiguousarray(d_color), np.ascontiguousarray(d_depth),
            np.ascontiguousarray(d_opacity),
            g_mean2, g_conic, g_color, g_opac, g_depth,
        )
        out_centers = np.zeros((n, 3))
        out_log_scales = np.zeros((n, 3))
        out_quats = np.zeros((n, 4))
        out_opac_logit = np.zeros(n)
        out_color_logit = np.zeros((n, 3))
        if n:
            _geometry_backward_kernel(
                self.gmap.centers, self.gmap.log_scales, self.gmap.quats,
                self.opacities, self.colors,
                self._rwc, self._twc, intr.fx, intr.fy,
                self.valid, self.conic,
                g_mean2, g_conic, g_color, g_opac, g_depth,
                out_centers, out_log_scales, out_quats,
                out_opac_logit, out_color_logit, cfg.znear,
            )
        return {
            "centers": out_centers,
            "log_scales": out_log_scales,
            "quats": out_quats,
            "opacity_logit": out_opac_logit,
            "color_logit": out_color_logit,
        }


def rasterize(gmap, pose: np.ndarray, intr: Intrinsics, cfg: RasterConfig | None = None) -> RenderOutput:
    """Render the map from a camera-to-world pose."""
    return RasterWorkspace(gmap, pose, intr, cfg).forward()
