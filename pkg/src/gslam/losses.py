"""Scalar objectives for tracking, mapping, and refinement, plus Adam.

All losses return analytic gradients alongside the value; gradient
convention for camera poses is the right-perturbation tangent
(rotation, translation) used everywhere in this package.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import cv2
import numpy as np

from gslam.geometry import CameraIntrinsics, Pose, adjoint, skew, unproject
from gslam.render import ANISOTROPIC, GaussianMap, RenderOutput, render, render_backward

log = logging.getLogger(__name__)

WARP_NEAR_PLANE = 0.01


class NoValidCorrespondences(ValueError):
    """Warping term has no usable correspondences; fall back to rendering loss."""


@dataclass
class LossWeights:
    """Balance constants for the tracking / mapping objectives."""

    lambda_c: float = 1.0   # color L1 weight
    lambda_d: float = 0.2   # depth L1 weight
    gamma: float = 10.0     # feature-map vs feature-point warping balance
    alpha: float = 10.0     # warping vs rendering balance
    theta: float = 0.99     # silhouette mask threshold

    def __post_init__(self):
        if min(self.lambda_c, self.lambda_d, self.gamma, self.alpha) < 0:
            raise ValueError("loss weights must be nonnegative")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must be in [0, 1]")


@dataclass
class Correspondence:
    """One keyframe->current keypoint match used by the warping loss."""

    kf_pixel: np.ndarray
    cur_pixel: np.ndarray
    kf_depth: float
    valid: bool = True


def rendering_loss(rendered: RenderOutput, observed_color: np.ndarray,
                   observed_depth: np.ndarray, w: LossWeights,
                   use_silhouette_mask: bool, max_depth: Optional[float] = None):
    """Masked L1 photometric + depth loss against an observation.

    With the silhouette mask on, both terms use (S > theta) AND
    depth-validity; with it off, the color term covers every pixel and the
    depth term keeps only depth-validity.  Both terms are normalized by
    the total pixel count: the lambda weights stay meaningful across
    resolutions and masking can only shrink the loss.

    Returns (loss, d_loss/d_rendered_color, d_loss/d_rendered_depth).
    """
    if rendered.color.shape != observed_color.shape or rendered.depth.shape != observed_depth.shape:
        raise ValueError("rendered / observed image dimensions do not match")

    depth_valid = observed_depth > 0
    if max_depth is not None:
        depth_valid &= observed_depth <= max_depth
    if use_silhouette_mask:
        sil = rendered.silhouette > w.theta
        color_mask = sil & depth_valid
        depth_mask = color_mask
    else:
        color_mask = np.ones_like(depth_valid)
        depth_mask = depth_valid

    grad_c = np.zeros_like(rendered.color)
    grad_d = np.zeros_like(rendered.depth)
    loss = 0.0
    npix = rendered.depth.size

    if color_mask.any() and w.lambda_c > 0:
        diff = rendered.color - observed_color
        loss += w.lambda_c * np.abs(diff[color_mask]).sum() / npix
        grad_c = w.lambda_c * np.sign(diff) * color_mask[:, :, None] / npix

    if depth_mask.any() and w.lambda_d > 0:
        ddiff = rendered.depth - observed_depth
        loss += w.lambda_d * np.abs(ddiff[depth_mask]).sum() / npix
        grad_d = w.lambda_d * np.sign(ddiff) * depth_mask / npix

    return float(loss), grad_c, grad_d


# ---------------------------------------------------------------------------
# SSIM (11x11 Gaussian window, sigma 1.5), with gradient w.r.t. the first image
# ---------------------------------------------------------------------------

_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


def _ssim_window() -> np.ndarray:
    x = np.arange(11) - 5.0
    g = np.exp(-(x ** 2) / (2 * 1.5 ** 2))
    g /= g.sum()
    return np.outer(g, g)


_WIN = _ssim_window()


def _filt(img: np.ndarray) -> np.ndarray:
    return cv2.filter2D(img, -1, _WIN, borderType=cv2.BORDER_REFLECT)


def ssim(img_a: np.ndarray, img_b: np.ndarray, with_grad: bool = True):
    """Mean structural similarity over channels and pixels, in [-1, 1].

    Statistics use the 11x11 Gaussian window; the mean is taken over the
    interior region where the window fits entirely.  When ``with_grad``,
    also returns d(ssim)/d(img_a).
    """
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("ssim images must have identical shapes")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    H, W, C = a.shape
    if H < 11 or W < 11:
        raise ValueError("images too small for the 11x11 ssim window")

    interior = (slice(5, H - 5), slice(5, W - 5))
    n_valid = (H - 10) * (W - 10) * C
    total = 0.0
    grad = np.zeros((H, W, C)) if with_grad else None

    for ch in range(C):
        ac, bc = a[:, :, ch], b[:, :, ch]
        mu_a, mu_b = _filt(ac), _filt(bc)
        var_a = _filt(ac * ac) - mu_a * mu_a
        var_b = _filt(bc * bc) - mu_b * mu_b
        cov = _filt(ac * bc) - mu_a * mu_b

        A1 = 2 * mu_a * mu_b + _SSIM_C1
        A2 = 2 * cov + _SSIM_C2
        B1 = mu_a ** 2 + mu_b ** 2 + _SSIM_C1
        B2 = var_a + var_b + _SSIM_C2
        S = (A1 * A2) / (B1 * B2)
        total += S[interior].sum()

        if with_grad:
            d_mu = (2 * mu_b * A2 / (B1 * B2) - 2 * mu_a * S / B1)
            d_var = -S / B2
            d_cov = 2 * A1 / (B1 * B2)
            for m in (d_mu, d_var, d_cov):
                m[:5, :] = 0
                m[-5:, :] = 0
                m[:, :5] = 0
                m[:, -5:] = 0
            # transpose of the window correlation is itself (symmetric kernel)
            g = (_filt(d_mu)
                 + 2 * ac * _filt(d_var) - 2 * _filt(d_var * mu_a)
                 + bc * _filt(d_cov) - _filt(d_cov * mu_b))
            grad[:, :, ch] = g / n_valid

    value = total / n_valid
    if with_grad:
        return float(value), grad
    return float(value)


# ---------------------------------------------------------------------------
# feature-alignment warping losses
# ---------------------------------------------------------------------------

def bilinear_sample(img: np.ndarray, pts: np.ndarray):
    """Sample (H, W, C) image at subpixel (u, v) points with gradients.

    Returns (values (N, C), d/du (N, C), d/dv (N, C)); points are clamped
    to the image with zero spatial gradient at the clamp.
    """
    H, W = img.shape[:2]
    feat = img if img.ndim == 3 else img[:, :, None]
    u = pts[:, 0]
    v = pts[:, 1]
    inside = (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    uc = np.clip(u, 0, W - 1 - 1e-9)
    vc = np.clip(v, 0, H - 1 - 1e-9)
    x0 = np.floor(uc).astype(int)
    y0 = np.floor(vc).astype(int)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    au = (uc - x0)[:, None]
    av = (vc - y0)[:, None]

    f00 = feat[y0, x0]
    f01 = feat[y0, x1]
    f10 = feat[y1, x0]
    f11 = feat[y1, x1]
    top = f00 * (1 - au) + f01 * au
    bot = f10 * (1 - au) + f11 * au
    val = top * (1 - av) + bot * av
    d_du = ((f01 - f00) * (1 - av) + (f11 - f10) * av) * inside[:, None]
    d_dv = (bot - top) * inside[:, None]
    return val, d_du, d_dv


def warp_point(c: Correspondence, T_qk: Pose, K: CameraIntrinsics):
    """Reproject a keyframe keypoint into the current image via T_qk.

    Returns the warped pixel, or None when the point lands behind the
    current camera (correspondence dropped for this iteration).
    """
    if not c.valid:
        raise ValueError("warp_point requires a valid correspondence")
    X_k = unproject(np.asarray(c.kf_pixel, dtype=np.float64), c.kf_depth, K)
    X_q = T_qk.apply(X_k)
    if X_q[2] <= WARP_NEAR_PLANE:
        return None
    return np.array([K.fx * X_q[0] / X_q[2] + K.cx, K.fy * X_q[1] / X_q[2] + K.cy])


def warping_loss(correspondences, feature_map_cur: Optional[np.ndarray],
                 T_qk: Pose, K: CameraIntrinsics, w: LossWeights):
    """Feature-point + feature-map warping loss with its pose gradient.

    The gradient is with respect to the right-perturbation tangent of
    T_qk.  Correspondences flagged invalid are masked out; points warping
    behind the camera are dropped for this evaluation.  Raises
    NoValidCorrespondences when nothing remains.
    """
    live = [c for c in correspondences if c.valid]
    if not live:
        raise NoValidCorrespondences("no valid correspondences")

    kf_px = np.array([c.kf_pixel for c in live], dtype=np.float64)
    cur_px = np.array([c.cur_pixel for c in live], dtype=np.float64)
    depth = np.array([c.kf_depth for c in live], dtype=np.float64)

    X_k = unproject(kf_px, depth, K)
    R = T_qk.rotation
    X_q = X_k @ R.T + T_qk.t
    front = X_q[:, 2] > WARP_NEAR_PLANE
    if not np.any(front):
        raise NoValidCorrespondences("all warped points behind the camera")
    X_k, X_q, cur_px = X_k[front], X_q[front], cur_px[front]
    n = X_q.shape[0]

    xq, yq, zq = X_q[:, 0], X_q[:, 1], X_q[:, 2]
    warped = np.stack([K.fx * xq / zq + K.cx, K.fy * yq / zq + K.cy], axis=1)

    # feature-point term: mean L2 pixel distance
    e = warped - cur_px
    norms = np.linalg.norm(e, axis=1)
    loss_fp = norms.mean()
    d_warped = np.zeros_like(e)
    nz = norms > 1e-12
    d_warped[nz] = e[nz] / norms[nz, None] / n

    # feature-map term: mean L2 descriptor distance at the warped location
    loss_fm = 0.0
    if w.gamma > 0 and feature_map_cur is not None:
        f_w, f_du, f_dv = bilinear_sample(feature_map_cur, warped)
        f_t, _, _ = bilinear_sample(feature_map_cur, cur_px)
        fdiff = f_w - f_t
        fnorm = np.linalg.norm(fdiff, axis=1)
        loss_fm = fnorm.mean()
        fnz = fnorm > 1e-12
        unit = np.zeros_like(fdiff)
        unit[fnz] = fdiff[fnz] / fnorm[fnz, None]
        d_warped[:, 0] += w.gamma * (unit * f_du).sum(axis=1) / n
        d_warped[:, 1] += w.gamma * (unit * f_dv).sum(axis=1) / n

    # chain to the pose tangent
    z2 = zq * zq
    d_Xq = np.zeros((n, 3))
    d_Xq[:, 0] = d_warped[:, 0] * K.fx / zq
    d_Xq[:, 1] = d_warped[:, 1] * K.fy / zq
    d_Xq[:, 2] = -d_warped[:, 0] * K.fx * xq / z2 - d_warped[:, 1] * K.fy * yq / z2

    g_local = d_Xq @ R            # R^T dL/dX_q per point
    d_rho = g_local.sum(axis=0)
    d_omega = np.cross(X_k, g_local).sum(axis=0)
    return float(loss_fp + w.gamma * loss_fm), np.concatenate([d_omega, d_rho])


@dataclass
class WarpData:
    """Frozen warping-term inputs for one tracked frame."""

    correspondences: list
    feature_map: Optional[np.ndarray]
    T_kf_cw: Pose


def tracking_loss(gmap: GaussianMap, T_cw: Pose, K: CameraIntrinsics,
                  observed_color: np.ndarray, observed_depth: np.ndarray,
                  w: LossWeights, warp: Optional[WarpData] = None,
                  max_depth: Optional[float] = None):
    """Total tracking objective (rendering + alpha * warping) and its
    gradient w.r.t. the right-perturbation tangent of T_cw.

    Returns (loss, d_tangent, info) where info records the components and
    whether the warping term was active.
    """
    out = render(gmap, T_cw, K)
    loss_r, gc, gd = rendering_loss(out, observed_color, observed_depth, w,
                                    use_silhouette_mask=True, max_depth=max_depth)
    grads = render_backward(gmap, T_cw, K, gc, gd)
    total = loss_r
    d_pose = grads.d_pose
    info = {"rendering": loss_r, "warping": None}

    if warp is not None and w.alpha > 0:
        try:
            T_qk = T_cw @ warp.T_kf_cw.inverse()
            loss_w, g_qk = warping_loss(warp.correspondences, warp.feature_map, T_qk, K, w)
            total += w.alpha * loss_w
            d_pose = d_pose + w.alpha * (adjoint(warp.T_kf_cw).T @ g_qk)
            info["warping"] = loss_w
        except NoValidCorrespondences:
            pass
    return float(total), d_pose, info


def mapping_loss(rendered: RenderOutput, observed_color: np.ndarray,
                 observed_depth: np.ndarray, w: LossWeights,
                 max_depth: Optional[float] = None):
    """Mapping objective: unmasked rendering loss plus (1 - SSIM).

    Returns (loss, d/d_rendered_color, d/d_rendered_depth).
    """
    loss_r, gc, gd = rendering_loss(rendered, observed_color, observed_depth, w,
                                    use_silhouette_mask=False, max_depth=max_depth)
    s_val, s_grad = ssim(rendered.color, observed_color)
    return float(loss_r + (1.0 - s_val)), gc - s_grad, gd


def scale_regularization(gmap: GaussianMap):
    """Mean min-scale flatness regularizer for ellipsoid maps.

    Subgradient flows to the argmin component (lowest index on ties).
    Returns (loss, d_scale).
    """
    if gmap.mode != ANISOTROPIC:
        raise ValueError("scale regularization requires an anisotropic map; convert first")
    n = len(gmap)
    grad = np.zeros((n, 3))
    if n == 0:
        return 0.0, grad
    mins = gmap.scale.min(axis=1)
    arg = gmap.scale.argmin(axis=1)
    grad[np.arange(n), arg] = 1.0 / n
    return float(mins.mean()), grad


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @staticmethod
    def like(params: np.ndarray) -> "AdamState":
        return AdamState(np.zeros_like(params, dtype=np.float64),
                         np.zeros_like(params, dtype=np.float64))


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float):
    """One bias-corrected Adam update.

    Returns (new_params, state, applied); non-finite gradients skip the
    update and leave the state untouched.
    """
    grads = np.asarray(grads, dtype=np.float64)
    if not np.all(np.isfinite(grads)):
        log.warning("adam_step skipped: non-finite gradient (|bad|=%d)",
                    int((~np.isfinite(grads)).sum()))
        return params, state, False
    state.t += 1
    state.m = ADAM_BETA1 * state.m + (1 - ADAM_BETA1) * grads
    state.v = ADAM_BETA2 * state.v + (1 - ADAM_BETA2) * grads * grads
    m_hat = state.m / (1 - ADAM_BETA1 ** state.t)
    v_hat = state.v / (1 - ADAM_BETA2 ** state.t)
    return params - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS), state, True


# ---------------------------------------------------------------------------
# bounded reparameterizations for map optimization
# ---------------------------------------------------------------------------

def logit(p: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    p = np.clip(p, eps, 1 - eps)
    return np.log(p / (1 - p))


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def sigmoid_grad_chain(x: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    s = sigmoid(x)
    return grad_p * s * (1 - s)
