"""View reconstruction and the photometric loss stack, with hand-written adjoints.

Images are channel-first float arrays ``(..., C, H, W)`` in ``[0, 1]``; depth and
disparity maps are ``(..., H, W)``. Every differentiable forward function has a
``*_backward`` companion returning gradients w.r.t. its differentiable inputs.
Masks (validity, auto-mask) are constants for differentiation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .geometry import Intrinsics, Pose

SSIM_ALPHA = 0.85
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

REC_R_WEIGHT = 0.2  # beta
SMOOTH_WEIGHT = 1e-3  # lambda
ISD_WEIGHT = 0.1

_MIN_Z = 1e-6


# --------------------------------------------------------------------- warping


@dataclass
class WarpResult:
    image: np.ndarray
    valid: np.ndarray
    cache: Optional[dict] = field(default=None, repr=False)


def warp_batch(source, depth, k: Intrinsics, R, t) -> WarpResult:
    """Inverse-warp ``source`` (B, C, H, W) into the target view.

    ``depth`` is the target depth (B, H, W); ``R`` (B, 3, 3) and ``t`` (B, 3)
    map target-camera points into the source camera. Sampling coordinates are
    clamped to the image border; pixels whose bilinear taps leave the image or
    whose point lies behind the source camera are marked invalid.
    """
    B, C, H, W = source.shape
    n = H * W
    rays = k.pixel_rays().reshape(1, n, 3).astype(source.dtype, copy=False)
    X = depth.reshape(B, n, 1) * rays
    Y = X @ np.swapaxes(R, 1, 2).astype(source.dtype, copy=False) + t[:, None, :].astype(source.dtype, copy=False)
    z = Y[..., 2]
    front = z > _MIN_Z
    zs = np.where(front, z, 1.0)
    u = k.fx * Y[..., 0] / zs + k.cx
    v = k.fy * Y[..., 1] / zs + k.cy
    valid = front & (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)

    uc = np.clip(np.nan_to_num(u), 0, W - 1)
    vc = np.clip(np.nan_to_num(v), 0, H - 1)
    x0 = np.minimum(uc.astype(np.intp), W - 2)
    y0 = np.minimum(vc.astype(np.intp), H - 2)
    wx = (uc - x0).astype(source.dtype).ravel()
    wy = (vc - y0).astype(source.dtype).ravel()

    # channel-major flat copy so the four taps are plain fancy-index gathers
    flat = source.reshape(B, C, n).transpose(1, 0, 2).reshape(C, B * n)
    i = (y0 * W + x0 + (np.arange(B) * n)[:, None]).ravel()
    i00 = np.take(flat, i, axis=1, mode="clip")
    i01 = np.take(flat, i + 1, axis=1, mode="clip")
    i10 = np.take(flat, i + W, axis=1, mode="clip")
    i11 = np.take(flat, i + W + 1, axis=1, mode="clip")
    top = i00 + wx * (i01 - i00)
    bot = i10 + wx * (i11 - i10)
    img = top + wy * (bot - top)

    cache = dict(
        k=k, rays=rays, X=X, Y=Y, zs=zs, R=R, shape=(B, C, H, W),
        # clamped coordinates carry no gradient
        gu_on=front & (u > 0) & (u < W - 1),
        gv_on=front & (v > 0) & (v < H - 1),
        d_du=(1 - wy) * (i01 - i00) + wy * (i11 - i10),
        d_dv=bot - top,
    )
    img = img.reshape(C, B, H, W).transpose(1, 0, 2, 3)
    return WarpResult(np.ascontiguousarray(img), valid.reshape(B, H, W), cache)


def warp_batch_backward(res: WarpResult, g_img):
    """Returns ``(g_depth, g_R, g_t)`` for an upstream image gradient."""
    c = res.cache
    k = c["k"]
    B, C, H, W = c["shape"]
    g = np.asarray(g_img).transpose(1, 0, 2, 3).reshape(C, B * H * W)
    g_u = np.where(c["gu_on"], (g * c["d_du"]).sum(axis=0).reshape(B, H * W), 0.0)
    g_v = np.where(c["gv_on"], (g * c["d_dv"]).sum(axis=0).reshape(B, H * W), 0.0)
    Y, zs = c["Y"], c["zs"]
    g_Y = np.empty_like(Y)
    g_Y[..., 0] = g_u * k.fx / zs
    g_Y[..., 1] = g_v * k.fy / zs
    g_Y[..., 2] = -(g_u * k.fx * Y[..., 0] + g_v * k.fy * Y[..., 1]) / zs**2
    g_X = g_Y @ c["R"]
    g_depth = (g_X * c["rays"]).sum(axis=-1).reshape(B, H, W)
    g_R = np.swapaxes(g_Y, 1, 2) @ c["X"]
    g_t = g_Y.sum(axis=1)
    return g_depth, g_R, g_t


def warp(source, depth, k: Intrinsics, pose: Pose) -> WarpResult:
    """Single-image inverse warp; ``source`` is (C, H, W), ``depth`` (H, W)."""
    if np.any(np.asarray(depth) <= 0):
        raise ValueError("depth must be positive")
    res = warp_batch(source[None], np.asarray(depth, float)[None], k, pose.R[None], pose.translation[None])
    return WarpResult(res.image[0], res.valid[0], None)


# ------------------------------------------------------------------------ SSIM


@lru_cache(maxsize=None)
def _box3(n: int, dtype=np.float64) -> np.ndarray:
    """3-tap mean filter with reflect padding, as an (n, n) matrix."""
    if n < 2:
        raise ValueError("reflect padding needs at least 2 pixels")
    m = np.zeros((n, n))
    for i in range(n):
        for j in (i - 1, i, i + 1):
            if j < 0:
                j = -j
            elif j >= n:
                j = 2 * (n - 1) - j
            m[i, j] += 1.0 / 3.0
    m = m.astype(dtype)
    m.setflags(write=False)
    return m


def _filter(x, a_h, a_w):
    # one large GEMM along W, then a batched product along H
    H, W = x.shape[-2:]
    y = (x.reshape(-1, W) @ a_w).reshape(-1, H, W)
    return np.matmul(a_h, y).reshape(x.shape)


def mean_filter(x):
    H, W = x.shape[-2:]
    return _filter(x, _box3(H, x.dtype.type), _box3(W, x.dtype.type).T)


def mean_filter_adjoint(g):
    H, W = g.shape[-2:]
    return _filter(g, _box3(H, g.dtype.type).T, _box3(W, g.dtype.type))


def _ssim_parts(x, y):
    mx, my = mean_filter(x), mean_filter(y)
    sxx = mean_filter(x * x) - mx * mx
    syy = mean_filter(y * y) - my * my
    sxy = mean_filter(x * y) - mx * my
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * sxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = sxx + syy + SSIM_C2
    return dict(mx=mx, my=my, a1=a1, a2=a2, b1=b1, b2=b2, s=a1 * a2 / (b1 * b2))


def ssim(x, y):
    """Per-pixel, per-channel SSIM over 3x3 windows."""
    return _ssim_parts(x, y)["s"]


def recon_error(x, y, alpha: float = SSIM_ALPHA, return_parts: bool = False):
    """Per-pixel ``alpha*(1-SSIM)/2 + (1-alpha)*|x-y|``, averaged over channels.

    ``x`` and ``y`` are (..., C, H, W); the result is (..., H, W). With
    ``return_parts`` the SSIM intermediates are returned as well, for reuse by
    :func:`recon_error_backward`.
    """
    parts = _ssim_parts(x, y)
    d = np.clip((1.0 - parts["s"]) / 2.0, 0.0, 1.0)
    err = (alpha * d + (1 - alpha) * np.abs(x - y)).mean(axis=-3)
    return (err, parts) if return_parts else err


def recon_error_backward(x, y, g, alpha: float = SSIM_ALPHA, parts=None):
    """Gradient w.r.t. ``x`` for an upstream per-pixel gradient ``g`` (..., H, W)."""
    p = parts if parts is not None else _ssim_parts(x, y)
    C = x.shape[-3]
    g = (g[..., None, :, :] / C).astype(x.dtype, copy=False)
    raw = (1.0 - p["s"]) / 2.0
    g_s = np.where((raw > 0) & (raw < 1), -0.5 * alpha * g, 0.0).astype(x.dtype, copy=False)
    denom = p["b1"] * p["b2"]
    ds_dmx = 2 * p["my"] * p["a2"] / denom - p["s"] * 2 * p["mx"] / p["b1"]
    ds_dsxx = -p["s"] / p["b2"]
    ds_dsxy = 2 * p["a1"] / denom
    gb = g_s * ds_dsxx
    gc = g_s * ds_dsxy
    g_mx = g_s * ds_dmx - 2 * p["mx"] * gb - p["my"] * gc
    g_x = mean_filter_adjoint(g_mx) + 2 * x * mean_filter_adjoint(gb) + y * mean_filter_adjoint(gc)
    return g_x + (1 - alpha) * g * np.sign(x - y)


# ------------------------------------------------------ min-reprojection, mask


def min_recon_loss(errors: Sequence[np.ndarray], valids: Optional[Sequence[np.ndarray]] = None):
    """Per-pixel minimum over sources, honouring validity.

    Returns ``(loss, valid, choice)``; ``choice`` indexes the winning source
    (first wins ties) and ``loss`` is ``inf`` where no source is valid.
    """
    errs = np.stack([np.asarray(e, float) for e in errors])
    if valids is not None:
        errs = np.where(np.stack(valids), errs, np.inf)
    choice = np.argmin(errs, axis=0)
    loss = np.take_along_axis(errs, choice[None], axis=0)[0]
    return loss, np.isfinite(loss), choice


def automask_from_errors(warped_min, raw_min):
    return warped_min < raw_min


def automask(target, raw_sources, warped: Sequence[WarpResult]):
    """Keep pixels whose best warped error is strictly below the best unwarped error."""
    raw = np.min(np.stack([recon_error(s, target) for s in raw_sources]), axis=0)
    w_min, _, _ = min_recon_loss([recon_error(w.image, target) for w in warped], [w.valid for w in warped])
    return automask_from_errors(w_min, raw)


def masked_mean(loss_map, mask):
    n = int(mask.sum())
    if n == 0:
        return 0.0, 0
    return float(loss_map[mask].sum() / n), n


# ------------------------------------------------------------------ smoothness


def _edge_weights(image):
    gx = np.exp(-np.abs(np.diff(image, axis=-1)).mean(axis=-3))
    gy = np.exp(-np.abs(np.diff(image, axis=-2)).mean(axis=-3))
    return gx, gy


def smoothness_loss(disp, image) -> float:
    """Edge-aware smoothness of mean-normalised disparity.

    Mean over pixels of ``|dx d*| exp(-|dx I|)`` plus the same in y, with
    forward differences; leading batch axes are averaged.
    """
    disp = np.asarray(disp, float)
    n = disp / disp.mean(axis=(-2, -1), keepdims=True)
    wx, wy = _edge_weights(image)
    per = (np.abs(np.diff(n, axis=-1)) * wx).mean(axis=(-2, -1)) + (
        np.abs(np.diff(n, axis=-2)) * wy
    ).mean(axis=(-2, -1))
    return float(np.mean(per))


def smoothness_backward(disp, image, g: float = 1.0):
    disp = np.asarray(disp, float)
    H, W = disp.shape[-2:]
    batch = disp.size // (H * W)
    m = disp.mean(axis=(-2, -1), keepdims=True)
    n = disp / m
    wx, wy = _edge_weights(image)
    gx = np.sign(np.diff(n, axis=-1)) * wx * (g / (batch * H * (W - 1)))
    gy = np.sign(np.diff(n, axis=-2)) * wy * (g / (batch * (H - 1) * W))
    g_n = np.zeros_like(n)
    g_n[..., :, 1:] += gx
    g_n[..., :, :-1] -= gx
    g_n[..., 1:, :] += gy
    g_n[..., :-1, :] -= gy
    coupling = (g_n * disp).sum(axis=(-2, -1), keepdims=True) / (m * m * H * W)
    return g_n / m - coupling


# ------------------------------------------------------------------ total loss


@dataclass
class LossBreakdown:
    rec_t: float = 0.0
    rec_r: float = 0.0
    smooth: float = 0.0
    isd: float = 0.0
    total: float = 0.0
    min_error: Optional[np.ndarray] = field(default=None, repr=False)
    # optional per-scale values of the averaged terms
    per_scale: Optional[dict] = field(default=None, repr=False)

    def as_dict(self):
        return dict(rec_t=self.rec_t, rec_r=self.rec_r, smooth=self.smooth, isd=self.isd, total=self.total)


def total_loss(rec_t, rec_r=0.0, smooth=0.0, isd=0.0, beta=REC_R_WEIGHT, lam=SMOOTH_WEIGHT, mu=ISD_WEIGHT):
    return math.fsum([rec_t, beta * rec_r, lam * smooth, mu * isd])
