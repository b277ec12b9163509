import numpy as np
import pytest

from gslam.config import SlamConfig
from gslam.features import ClassicalFeatureProvider
from gslam.geometry import Pose, se3_exp
from gslam.losses import WarpData
from gslam.render import render
from gslam.tracking import (
    Frame,
    TrackingFailure,
    constant_velocity_prior,
    estimate_prior_pose,
    track_frame,
)

from helpers import build_slam_fixture, make_keyframe


@pytest.fixture(scope="module")
def fixture():
    scene, K, provider = build_slam_fixture(seed=2, n_gauss=1500, path_length=24)
    kf = make_keyframe(scene, K, provider, frame_idx=0)
    return scene, K, provider, kf


def make_frame(scene, K, provider, idx):
    ts, pose = scene.trajectory[idx]
    color, depth = scene.observe(pose, K)
    fs = provider.detect_and_describe(color, pose=pose, image_id=idx)
    return Frame(idx, ts, color, depth, feature_set=fs), pose


def pose_errors(a: Pose, b: Pose):
    rel = a @ b.inverse()
    center_dist = np.linalg.norm(a.inverse().t - b.inverse().t)
    return np.degrees(rel.rotation_angle()), float(center_dist)


class TestPriorPose:
    def test_same_frame_gives_identity(self, fixture):
        scene, K, provider, kf = fixture
        frame, pose = make_frame(scene, K, provider, 0)
        cfg = SlamConfig(feature_provider="oracle")
        prior, source, corr, inl = estimate_prior_pose(
            frame, kf, K, cfg, np.random.default_rng(0))
        assert source == "pnp"
        deg, trans = pose_errors(prior, pose)
        assert deg < 1e-3 and trans < 1e-4
        assert len(corr) >= cfg.min_pnp_inliers

    def test_small_step_recovered(self, fixture):
        scene, K, provider, kf = fixture
        frame, truth = make_frame(scene, K, provider, 1)
        cfg = SlamConfig(feature_provider="oracle")
        prior, source, _, _ = estimate_prior_pose(
            frame, kf, K, cfg, np.random.default_rng(0))
        assert source == "pnp"
        deg, trans = pose_errors(prior, truth)
        assert deg < 0.1 and trans < 0.01

    def test_icp_fallback_without_features(self, fixture):
        scene, K, provider, kf = fixture
        frame, truth = make_frame(scene, K, provider, 1)
        # classical provider on a constant image: no keypoints -> no PnP
        flat = np.full_like(frame.color, 0.5)
        frame_flat = Frame(frame.frame_id, frame.timestamp, flat, frame.depth,
                           feature_set=ClassicalFeatureProvider().detect_and_describe(flat))
        cfg = SlamConfig()
        prior, source, _, _ = estimate_prior_pose(
            frame_flat, kf, K, cfg, np.random.default_rng(0),
            prev_pose=kf.pose)
        assert source in ("icp", "constant_velocity")

    def test_constant_velocity_when_nothing_available(self, fixture):
        scene, K, provider, kf = fixture
        frame, _ = make_frame(scene, K, provider, 1)
        bare = Frame(frame.frame_id, frame.timestamp, frame.color, frame.depth,
                     feature_set=ClassicalFeatureProvider().detect_and_describe(
                         np.full_like(frame.color, 0.5)))
        import dataclasses
        kf_no_depth = dataclasses.replace(kf, obs_color=None, obs_depth=None)
        cfg = SlamConfig()
        p_prev = scene.trajectory[0][1]
        p_prev2 = scene.trajectory[0][1]
        prior, source, _, _ = estimate_prior_pose(
            bare, kf_no_depth, K, cfg, np.random.default_rng(0),
            prev_pose=p_prev, prev_prev_pose=p_prev2)
        assert source == "constant_velocity"
        assert prior.almost_equal(constant_velocity_prior(p_prev, p_prev2), tol=1e-12)


class TestConstantVelocity:
    def test_no_history_identity(self):
        assert constant_velocity_prior(None, None).almost_equal(Pose.identity())

    def test_single_pose_held(self):
        p = se3_exp(np.array([0.1, 0, 0, 1.0, 0, 0]))
        assert constant_velocity_prior(p, None).almost_equal(p)

    def test_extrapolates_step(self):
        step = se3_exp(np.array([0, 0, 0, 0.5, 0, 0]))
        p1 = se3_exp(np.array([0, 0, 0, 1.0, 0, 0]))
        p2 = step @ p1
        pred = constant_velocity_prior(p2, p1)
        assert pred.almost_equal(step @ p2, tol=1e-9)


class TestTrackFrame:
    def test_truth_prior_stays_put(self, fixture):
        scene, K, provider, kf = fixture
        frame, truth = make_frame(scene, K, provider, 0)
        cfg = SlamConfig(feature_provider="oracle")
        pose, report = track_frame(frame, scene.gaussians, K, truth, cfg)
        deg, trans = pose_errors(pose, truth)
        assert deg < 0.02 and trans < 1e-3
        assert report.final_loss <= 1e-9

    def test_perturbed_prior_converges(self, fixture):
        scene, K, provider, kf = fixture
        frame, truth = make_frame(scene, K, provider, 0)
        cfg = SlamConfig(feature_provider="oracle")
        delta = np.array([0.02, -0.015, 0.01, 0.03, -0.02, 0.025])
        prior = truth @ se3_exp(delta)
        _, trans0 = pose_errors(prior, truth)
        pose, report = track_frame(frame, scene.gaussians, K, prior, cfg)
        _, trans1 = pose_errors(pose, truth)
        assert trans1 < 0.25 * trans0
        assert report.iterations_run <= cfg.tracking_iters

    def test_best_iterate_never_worse_than_prior(self, fixture):
        scene, K, provider, kf = fixture
        frame, truth = make_frame(scene, K, provider, 0)
        cfg = SlamConfig(feature_provider="oracle", tracking_iters=5)
        prior = truth @ se3_exp(np.array([0.03, 0, 0, 0.05, 0, 0]))
        from gslam.losses import tracking_loss
        prior_loss, _, _ = tracking_loss(scene.gaussians, prior, K, frame.color,
                                         frame.depth, cfg.loss_weights(),
                                         max_depth=cfg.depth_threshold_m)
        pose, report = track_frame(frame, scene.gaussians, K, prior, cfg)
        assert report.final_loss <= prior_loss + 1e-12

    def test_warping_correspondences_help(self, fixture):
        scene, K, provider, kf = fixture
        frame, truth = make_frame(scene, K, provider, 1)
        cfg = SlamConfig(feature_provider="oracle")
        prior, source, corr, _ = estimate_prior_pose(
            frame, kf, K, cfg, np.random.default_rng(1))
        warp = WarpData(corr, None, kf.pose)
        pose, report = track_frame(frame, scene.gaussians, K,
                                   prior @ se3_exp(np.array([0.01, 0, 0, 0.02, 0, 0])),
                                   cfg, warp=warp)
        assert report.warping_active
        deg, trans = pose_errors(pose, truth)
        assert trans < 0.05

    def test_zero_correspondences_falls_back(self, fixture):
        scene, K, provider, kf = fixture
        frame, truth = make_frame(scene, K, provider, 0)
        cfg = SlamConfig(feature_provider="oracle", tracking_iters=3)
        from gslam.losses import Correspondence
        dead = WarpData([Correspondence(np.zeros(2), np.zeros(2), 1.0, valid=False)],
                        None, kf.pose)
        pose, report = track_frame(frame, scene.gaussians, K, truth, cfg, warp=dead)
        assert not report.warping_active

    def test_non_finite_loss_raises(self, fixture):
        scene, K, provider, kf = fixture
        frame, truth = make_frame(scene, K, provider, 0)
        bad = Frame(frame.frame_id, frame.timestamp,
                    np.full_like(frame.color, np.nan), frame.depth)
        cfg = SlamConfig(feature_provider="oracle")
        with pytest.raises(TrackingFailure):
            track_frame(bad, scene.gaussians, K, truth, cfg)
