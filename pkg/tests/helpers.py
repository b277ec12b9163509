"""Shared test utilities: brute-force reference renderer, random scenes,
finite-difference gradient checks."""

import numpy as np
from scipy.spatial.transform import Rotation

from gslam.geometry import CameraIntrinsics, Pose, se3_exp
from gslam.render import (
    ALPHA_MAX,
    ANISOTROPIC,
    COV_DILATION,
    ISOTROPIC,
    NEAR_PLANE,
    SATURATION_EPS,
    TRUNCATION_Q,
    GaussianMap,
    render,
)


def reference_render(gmap, T_cw, K):
    """Per-pixel loop implementation of the compositing contract.

    Independent of the tiled/vectorized production path: evaluates every
    splat at every pixel with plain Python control flow.
    """
    H, W = K.height, K.width
    color = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    sil = np.zeros((H, W))
    if len(gmap) == 0:
        return color, depth, sil

    R = T_cw.rotation
    xc = gmap.mu @ R.T + T_cw.t
    order = [i for i in np.argsort(xc[:, 2], kind="stable") if xc[i, 2] > NEAR_PLANE]

    from gslam.render import FRUSTUM_MARGIN
    lim_x = FRUSTUM_MARGIN * 0.5 * K.width / K.fx
    lim_y = FRUSTUM_MARGIN * 0.5 * K.height / K.fy
    splats = []
    for i in order:
        x, y, z = xc[i]
        u = K.fx * x / z + K.cx
        v = K.fy * y / z + K.cy
        tx = np.clip(x / z, -lim_x, lim_x)
        ty = np.clip(y / z, -lim_y, lim_y)
        J = np.array([[K.fx / z, 0, -K.fx * tx / z], [0, K.fy / z, -K.fy * ty / z]])
        if gmap.mode == ISOTROPIC:
            sigma3d = gmap.radius[i] ** 2 * np.eye(3)
        else:
            Rq = Rotation.from_quat(gmap.quat[i]).as_matrix()
            sigma3d = Rq @ np.diag(gmap.scale[i] ** 2) @ Rq.T
        M = J @ R
        cov = M @ sigma3d @ M.T + COV_DILATION * np.eye(2)
        splats.append((i, u, v, z, np.linalg.inv(cov)))

    for py in range(H):
        for px in range(W):
            T = 1.0
            for i, u, v, z, icov in splats:
                d = np.array([px - u, py - v])
                q = d @ icov @ d
                if q > TRUNCATION_Q:
                    continue
                if T < SATURATION_EPS:
                    break
                f = min(gmap.opacity[i] * np.exp(-0.5 * q), ALPHA_MAX)
                w = f * T
                color[py, px] += w * gmap.color[i]
                depth[py, px] += w * z
                sil[py, px] += w
                T *= 1.0 - f
    return color, depth, sil


def make_scene(seed, n_gauss=8, mode=ISOTROPIC, size=16, fx=40.0, pose_seed=None):
    """Random splat scene framed so the splats land on screen."""
    rng = np.random.default_rng(seed)
    K = CameraIntrinsics(fx=fx, fy=fx, cx=(size - 1) / 2, cy=(size - 1) / 2,
                         width=size, height=size, baseline=0.1)
    T_cw = Pose.identity()
    if pose_seed is not None:
        prng = np.random.default_rng(pose_seed)
        T_cw = se3_exp(np.concatenate([prng.uniform(-0.2, 0.2, 3), prng.uniform(-0.3, 0.3, 3)]))

    z = rng.uniform(1.5, 3.0, size=n_gauss)
    half = 0.5 * size / fx  # frustum half-extent at unit depth
    x = rng.uniform(-0.7 * half, 0.7 * half, size=n_gauss) * z
    y = rng.uniform(-0.7 * half, 0.7 * half, size=n_gauss) * z
    mu_cam = np.stack([x, y, z], axis=1)
    mu_world = T_cw.inverse().apply(mu_cam)

    color = rng.uniform(0.1, 0.9, size=(n_gauss, 3))
    opacity = rng.uniform(0.2, 0.8, size=n_gauss)
    if mode == ISOTROPIC:
        radius = rng.uniform(0.05, 0.15, size=n_gauss)
        gmap = GaussianMap.from_arrays(mu_world, color, opacity, np.zeros(n_gauss),
                                       radius=radius)
    else:
        scale = rng.uniform(0.04, 0.15, size=(n_gauss, 3))
        quat = rng.normal(size=(n_gauss, 4))
        quat /= np.linalg.norm(quat, axis=1, keepdims=True)
        gmap = GaussianMap.from_arrays(mu_world, color, opacity, np.zeros(n_gauss),
                                       scale=scale, quat=quat)
    return gmap, T_cw, K


def make_upstream(seed, K, gmap=None, T_cw=None, margin=0.6):
    """Fixed random per-pixel upstream gradients for a synthetic scalar loss.

    When the scene is given, pixels near any splat's 3-sigma truncation
    boundary get zero weight so finite differences don't straddle the
    footprint discontinuity.
    """
    rng = np.random.default_rng(seed + 991)
    gc = rng.uniform(-1, 1, size=(K.height, K.width, 3))
    gd = rng.uniform(-1, 1, size=(K.height, K.width))
    gs = rng.uniform(-1, 1, size=(K.height, K.width))
    if gmap is not None and len(gmap) > 0:
        safe = _away_from_truncation(gmap, T_cw, K, margin)
        gc *= safe[:, :, None]
        gd *= safe
        gs *= safe
    return gc, gd, gs


def _away_from_truncation(gmap, T_cw, K, margin):
    from gslam.render import _prepare_splats

    s = _prepare_splats(gmap, T_cw, K)
    ys, xs = np.mgrid[0:K.height, 0:K.width]
    safe = np.ones((K.height, K.width), dtype=bool)
    for i in range(s.orig_idx.shape[0]):
        d0 = xs - s.u[i]
        d1 = ys - s.v[i]
        q = s.inv_a[i] * d0 * d0 + 2 * s.inv_b[i] * d0 * d1 + s.inv_c[i] * d1 * d1
        safe &= np.abs(q - TRUNCATION_Q) > margin
    return safe.astype(np.float64)


def scalar_loss(gmap, T_cw, K, gc, gd, gs):
    out = render(gmap, T_cw, K)
    return float((gc * out.color).sum() + (gd * out.depth).sum() + (gs * out.silhouette).sum())


def central_diff(fn, x0, h=1e-4):
    """Central finite difference of a scalar function at x0 (flat array)."""
    x0 = np.asarray(x0, dtype=np.float64)
    g = np.zeros_like(x0)
    for k in range(x0.size):
        xp = x0.copy()
        xp.flat[k] += h
        xm = x0.copy()
        xm.flat[k] -= h
        g.flat[k] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def grads_close(analytic, numeric, rel=1e-3, abs_floor=1e-6):
    analytic = np.asarray(analytic).ravel()
    numeric = np.asarray(numeric).ravel()
    denom = np.maximum(np.abs(numeric), np.abs(analytic))
    err = np.abs(analytic - numeric)
    ok = (err <= abs_floor) | (err <= rel * denom)
    return bool(np.all(ok)), float(np.max(err / np.maximum(denom, abs_floor)))


def build_slam_fixture(seed=0, n_gauss=700, path_length=12.0, kind="room",
                       render_scale=0.5, texture=1.0):
    """Synthetic scene + working-resolution camera + oracle provider."""
    from gslam.features import OracleFeatureProvider
    from gslam.synthetic import SceneSpec, generate_scene

    scene = generate_scene(seed, SceneSpec(kind, n_gaussians=n_gauss,
                                           path_length=path_length, texture=texture))
    K = scene.K.scaled(render_scale)
    provider = OracleFeatureProvider(scene.landmarks, K, seed=seed)
    return scene, K, provider


def make_keyframe(scene, K, provider, frame_idx, kf_id=0, submap_id=0):
    """Keyframe built from a ground-truth observation with oracle features."""
    from gslam.losses import bilinear_sample
    from gslam.mapping import Keyframe

    ts, pose = scene.trajectory[frame_idx]
    color, depth = scene.observe(pose, K)
    fs = provider.detect_and_describe(color, pose=pose, image_id=frame_idx)
    if fs.depths is not None:
        snap = fs.depths.copy()
    else:
        snap = bilinear_sample(depth[:, :, None], fs.keypoints)[0][:, 0]
    return Keyframe(kf_id=kf_id, frame_id=frame_idx, timestamp=ts, pose=pose.copy(),
                    feature_set=fs, global_desc=provider.global_descriptor(color, pose=pose),
                    submap_id=submap_id, depth_snapshot=snap,
                    obs_color=color, obs_depth=depth)
