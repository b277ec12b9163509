"""Per-frame camera pose estimation against the active submap.

Each frame gets a multi-modality prior (feature matching -> PnP-RANSAC,
point-cloud registration fallback, constant velocity as last resort),
then iterative first-order refinement of the combined rendering +
warping objective with the map held fixed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from gslam.config import SlamConfig
from gslam.features import match, pnp_ransac, register_point_clouds
from gslam.geometry import CameraIntrinsics, Pose, se3_exp, unproject
from gslam.losses import AdamState, Correspondence, WarpData, adam_step, tracking_loss

log = logging.getLogger(__name__)


class TrackingFailure(RuntimeError):
    """Loss not finite at the prior; frame should be dropped."""


@dataclass
class Frame:
    """One processed input frame (already at working resolution)."""

    frame_id: int
    timestamp: float
    color: np.ndarray
    depth: np.ndarray              # meters, 0 = invalid
    feature_set: object = None
    pose_estimate: Optional[Pose] = None


@dataclass
class TrackingReport:
    prior_source: str              # pnp | icp | constant_velocity
    pnp_inliers: int
    final_loss: float
    iterations_run: int
    warping_active: bool = False


def constant_velocity_prior(prev: Optional[Pose], prev_prev: Optional[Pose]) -> Pose:
    if prev is None:
        return Pose.identity()
    if prev_prev is None:
        return prev.copy()
    return (prev @ prev_prev.inverse()) @ prev


def _depth_cloud(depth: np.ndarray, K: CameraIntrinsics, max_depth: float,
                 stride: int = 4) -> np.ndarray:
    d = depth[::stride, ::stride]
    ys, xs = np.mgrid[0:depth.shape[0]:stride, 0:depth.shape[1]:stride]
    valid = (d > 0) & (d <= max_depth)
    if not np.any(valid):
        return np.zeros((0, 3))
    px = np.stack([xs[valid], ys[valid]], axis=1).astype(np.float64)
    return unproject(px, d[valid], K)


def estimate_prior_pose(frame: Frame, last_keyframe, K: CameraIntrinsics,
                        config: SlamConfig, rng: np.random.Generator,
                        prev_pose: Optional[Pose] = None,
                        prev_prev_pose: Optional[Pose] = None):
    """Multi-modality prior: PnP on 2D matches, ICP fallback, then constant
    velocity.  Always returns a pose.

    Returns (pose_world_to_camera, source, correspondences, pnp_inliers)
    where correspondences are the PnP inlier matches frozen for the
    warping term.
    """
    kf = last_keyframe
    matches = match(frame.feature_set, kf.feature_set)
    correspondences = []
    pnp_inliers = 0

    if len(matches) >= 4 and kf.depth_snapshot is not None:
        # match() pairs are (frame index, keyframe index)
        kf_px = kf.feature_set.keypoints[matches.pairs[:, 1]]
        cur_px = frame.feature_set.keypoints[matches.pairs[:, 0]]
        depths = kf.depth_snapshot[matches.pairs[:, 1]]
        usable = (depths > 0) & (depths <= config.depth_threshold_m)
        if usable.sum() >= 4:
            pts_kf = unproject(kf_px[usable], depths[usable], K)
            result = pnp_ransac(pts_kf, cur_px[usable], K,
                                inlier_px=config.pnp_inlier_px, rng=rng)
            if result is not None and result.num_inliers >= config.min_pnp_inliers:
                pose = result.pose @ kf.pose
                u_idx = np.nonzero(usable)[0]
                for j in u_idx[result.inliers]:
                    correspondences.append(Correspondence(
                        kf_pixel=kf_px[j].copy(), cur_pixel=cur_px[j].copy(),
                        kf_depth=float(depths[j]), valid=True))
                return pose, "pnp", correspondences, result.num_inliers
            pnp_inliers = 0 if result is None else result.num_inliers

    if kf.obs_depth is not None:
        src = _depth_cloud(frame.depth, K, config.depth_threshold_m)
        dst = _depth_cloud(kf.obs_depth, K, config.depth_threshold_m)
        if len(src) >= 20 and len(dst) >= 20:
            cv = constant_velocity_prior(prev_pose, prev_prev_pose)
            init = cv @ kf.pose.inverse()       # current-camera <- kf-camera
            T_qk = register_point_clouds(src, dst, init.inverse())
            if T_qk is not None:
                # ICP aligned cur cloud onto kf cloud: kf <- cur; invert
                return T_qk.inverse() @ kf.pose, "icp", [], pnp_inliers

    return (constant_velocity_prior(prev_pose, prev_prev_pose),
            "constant_velocity", [], pnp_inliers)


def track_frame(frame: Frame, gmap, K: CameraIntrinsics, prior: Pose,
                config: SlamConfig, warp: Optional[WarpData] = None,
                prior_source: str = "pnp", pnp_inliers: int = 0):
    """Refine the prior pose by Adam on the tracking objective.

    The map stays constant; warping correspondences are frozen.  Returns
    the best (lowest-loss) iterate and a TrackingReport.  Raises
    TrackingFailure when the loss is not finite at the prior.
    """
    weights = config.loss_weights()
    max_depth = config.depth_threshold_m

    loss0, grad, info = tracking_loss(gmap, prior, K, frame.color, frame.depth,
                                      weights, warp=warp, max_depth=max_depth)
    if not np.isfinite(loss0):
        raise TrackingFailure(f"non-finite tracking loss at prior for frame {frame.frame_id}")

    lr = np.array([config.lr_rot] * 3 + [config.lr_trans] * 3)
    tangent = np.zeros(6)
    state = AdamState.like(tangent)
    best_loss, best_pose = loss0, prior.copy()
    prev_loss = loss0
    stall = 0
    iterations = 0

    for it in range(config.tracking_iters):
        iterations = it + 1
        tangent, state, applied = adam_step(tangent, grad, state, lr)
        if not applied:
            break
        pose = prior @ se3_exp(tangent)
        loss, grad, info = tracking_loss(gmap, pose, K, frame.color, frame.depth,
                                         weights, warp=warp, max_depth=max_depth)
        if not np.isfinite(loss):
            break
        if loss < best_loss:
            best_loss, best_pose = loss, pose.copy()
        # early stop on stalled relative improvement
        rel = (prev_loss - loss) / max(abs(prev_loss), 1e-12)
        stall = stall + 1 if rel < config.early_stop_rel else 0
        if stall >= config.early_stop_patience:
            break
        prev_loss = loss

    report = TrackingReport(prior_source=prior_source, pnp_inliers=pnp_inliers,
                            final_loss=best_loss, iterations_run=iterations,
                            warping_active=info.get("warping") is not None)
    return best_pose, report
