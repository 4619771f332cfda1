"""Mapping loss: weighted color L1 + SSIM term plus masked depth L1.

The SSIM implementation (11x11 Gaussian window, zero-padded separable
convolutions, unit dynamic range stabilizers) carries its own analytic
backward pass so the full loss gradient with respect to the rendered images is
exact. Depth supervision applies only where the observed frame has depth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d


@dataclass
class LossConfig:
    lambda_l1: float = 0.8
    lambda_ssim: float = 0.2
    w_color: float = 0.5
    w_depth: float = 1.0
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    iterations: int = 15
    lr_centers: float = 1e-3
    lr_color: float = 2e-2
    lr_opacity: float = 2e-2
    lr_scales: float = 1e-3
    lr_rotation: float = 1e-3


@dataclass
class LossBreakdown:
    total: float
    color_l1: float
    ssim: float
    depth_l1: float
    color_residual: np.ndarray  # (H, W) mean abs channel residual
    depth_residual: np.ndarray  # (H, W) abs depth residual, 0 outside the valid mask


def _gauss_kernel(window: int, sigma: float) -> np.ndarray:
    half = (window - 1) / 2.0
    xs = np.arange(window) - half
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def _filt(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    tmp = correlate1d(img, kernel, axis=0, mode="constant", cval=0.0)
    return correlate1d(tmp, kernel, axis=1, mode="constant", cval=0.0)


class SSIMResult:
    def __init__(self, value, caches, kernel):
        self.value = value
        self._caches = caches
        self._kernel = kernel

    def backward(self, upstream: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """d(upstream * ssim)/dy for the images the forward pass saw."""
        nch = len(self._caches)
        grad = np.zeros_like(y, dtype=np.float64)
        for c, cache in enumerate(self._caches):
            mu_x, mu_y, a1, a2, b1, b2, s = cache
            npix = s.size
            ds = np.full_like(s, upstream / (npix * nch))
            denom = b1 * b2
            da1 = ds * a2 / denom
            da2 = ds * a1 / denom
            db1 = -ds * s / b1
            db2 = -ds * s / b2
            dmu_y = da1 * 2.0 * mu_x + db1 * 2.0 * mu_y
            dfxy = 2.0 * da2
            dfyy = db2
            dmu_y += -dfxy * mu_x
            dmu_y += -2.0 * mu_y * dfyy
            xc = x[..., c]
            yc = y[..., c]
            grad[..., c] = _filt(dmu_y, self._kernel) + xc * _filt(dfxy, self._kernel) \
                + 2.0 * yc * _filt(dfyy, self._kernel)
        return grad


def ssim(x: np.ndarray, y: np.ndarray, window: int = 11, sigma: float = 1.5) -> SSIMResult:
    """Mean SSIM between two (H, W, C) images in [0, 1]; keeps a backward cache."""
    c1 = 0.01 ** 2
    c2 = 0.03 ** 2
    kernel = _gauss_kernel(window, sigma)
    if x.ndim == 2:
        x = x[..., None]
        y = y[..., None]
    caches = []
    vals = []
    for c in range(x.shape[2]):
        xc = np.ascontiguousarray(x[..., c], dtype=np.float64)
        yc = np.ascontiguousarray(y[..., c], dtype=np.float64)
        mu_x = _filt(xc, kernel)
        mu_y = _filt(yc, kernel)
        sxx = _filt(xc * xc, kernel) - mu_x * mu_x
        syy = _filt(yc * yc, kernel) - mu_y * mu_y
        sxy = _filt(xc * yc, kernel) - mu_x * mu_y
        a1 = 2.0 * mu_x * mu_y + c1
        a2 = 2.0 * sxy + c2
        b1 = mu_x * mu_x + mu_y * mu_y + c1
        b2 = sxx + syy + c2
        s = (a1 * a2) / (b1 * b2)
        vals.append(float(s.mean()))
        caches.append((mu_x, mu_y, a1, a2, b1, b2, s))
    return SSIMResult(float(np.mean(vals)), caches, kernel)


def loss_and_render_grads(render, frame, cfg: LossConfig):
    """Loss value, breakdown, and analytic d(loss)/d(color_hat), d(loss)/d(depth_hat)."""
    chat = render.color_hat
    dhat = render.depth_hat
    cobs = frame.color
    dobs = frame.depth

    cdiff = chat - cobs
    color_l1 = float(np.abs(cdiff).mean())
    ssim_res = ssim(cobs, chat, cfg.ssim_window, cfg.ssim_sigma)

    mask = dobs > 0.0
    nvalid = int(mask.sum())
    ddiff = np.where(mask, dhat - dobs, 0.0)
    depth_l1 = float(np.abs(ddiff).sum() / nvalid) if nvalid else 0.0

    total = cfg.w_color * (cfg.lambda_l1 * color_l1 + cfg.lambda_ssim * (1.0 - ssim_res.value)) \
        + cfg.w_depth * depth_l1

    d_color = cfg.w_color * cfg.lambda_l1 * np.sign(cdiff) / cdiff.size
    d_color += ssim_res.backward(-cfg.w_color * cfg.lambda_ssim, cobs, chat)
    d_depth = np.zeros_like(dhat)
    if nvalid:
        d_depth = cfg.w_depth * np.sign(ddiff) / nvalid

    breakdown = LossBreakdown(
        total=total,
        color_l1=color_l1,
        ssim=ssim_res.value,
        depth_l1=depth_l1,
        color_residual=np.abs(cdiff).mean(axis=2),
        depth_residual=np.abs(ddiff),
    )
    return total, breakdown, d_color, d_depth


def compute_loss(render, frame, cfg: LossConfig):
    """Scalar mapping loss and its per-pixel residual breakdown."""
    total, breakdown, _, _ = loss_and_render_grads(render, frame, cfg)
    return total, breakdown
