"""Keyframe management, Gaussian insertion, map optimization, submaps.

The map is optimized with all camera poses fixed; keyframes carry their
observation buffers only while their submap is active, so memory stays
bounded by one submap regardless of trajectory length.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from gslam.config import SlamConfig
from gslam.geometry import CameraIntrinsics, Pose, unproject
from gslam.losses import (
    AdamState,
    adam_step,
    logit,
    mapping_loss,
    scale_regularization,
    sigmoid,
    sigmoid_grad_chain,
)
from gslam.render import ANISOTROPIC, ISOTROPIC, GaussianMap, render, render_backward

log = logging.getLogger(__name__)


@dataclass
class Keyframe:
    """Pose, features, and map-database entries for one selected frame.

    Observation buffers (obs_color / obs_depth) exist only while the
    owning submap is active; the frozen map stores no images.
    """

    kf_id: int
    frame_id: int
    timestamp: float
    pose: Pose                      # world -> camera
    feature_set: object
    global_desc: np.ndarray
    submap_id: int
    depth_snapshot: Optional[np.ndarray] = None   # map depth at keypoints
    obs_color: Optional[np.ndarray] = None
    obs_depth: Optional[np.ndarray] = None

    @property
    def has_buffers(self) -> bool:
        return self.obs_color is not None

    def drop_buffers(self):
        self.obs_color = None
        self.obs_depth = None


@dataclass
class Submap:
    """A bounded Gaussian map plus its keyframe database."""

    submap_id: int
    gaussians: GaussianMap = field(default_factory=GaussianMap)
    keyframes: list = field(default_factory=list)
    trajectory_length_m: float = 0.0
    frozen: bool = False

    def add_keyframe(self, kf: Keyframe):
        kf.submap_id = self.submap_id
        self.keyframes.append(kf)

    def keyframe_by_id(self, kf_id: int) -> Keyframe:
        for kf in self.keyframes:
            if kf.kf_id == kf_id:
                return kf
        raise KeyError(f"keyframe {kf_id} not in submap {self.submap_id}")

    def freeze(self):
        """Drop retained observation buffers; keep database + Gaussians."""
        for kf in self.keyframes:
            kf.drop_buffers()
        self.frozen = True

    def retained_buffer_count(self) -> int:
        return sum(1 for kf in self.keyframes if kf.has_buffers)


def maybe_create_keyframe(frame, tracked_index: int, config: SlamConfig) -> bool:
    """Keyframe cadence: first tracked frame, then every keyframe_stride."""
    return tracked_index % config.keyframe_stride == 0


def compute_overlap(kf_new: Keyframe, kf_old: Keyframe, depth_of_new: np.ndarray,
                    K: CameraIntrinsics, grid_stride: int = 4) -> float:
    """Fraction of kf_new's surface points that reproject into kf_old.

    Back-projects kf_new's valid-depth pixels on a subsampled grid and
    counts how many land in front of and inside kf_old's image.
    """
    d = depth_of_new[::grid_stride, ::grid_stride]
    ys, xs = np.mgrid[0:depth_of_new.shape[0]:grid_stride, 0:depth_of_new.shape[1]:grid_stride]
    valid = d > 0
    if not np.any(valid):
        return 0.0
    px = np.stack([xs[valid], ys[valid]], axis=1).astype(np.float64)
    world = kf_new.pose.inverse().apply(unproject(px, d[valid], K))
    cam = kf_old.pose.apply(world)
    z = cam[:, 2]
    front = z > 1e-6
    u = K.fx * cam[front, 0] / z[front] + K.cx
    v = K.fy * cam[front, 1] / z[front] + K.cy
    inside = (u >= 0) & (u <= K.width - 1) & (v >= 0) & (v <= K.height - 1)
    return float(inside.sum() / valid.sum())


def select_mapping_keyframes(submap: Submap, kf_new: Keyframe, K: CameraIntrinsics,
                             config: SlamConfig, rng: np.random.Generator) -> list:
    """Top-overlap keyframes plus seeded random ones, always with kf_new."""
    others = [kf for kf in submap.keyframes if kf.kf_id != kf_new.kf_id and kf.has_buffers]
    if not others:
        return [kf_new]
    overlaps = [(compute_overlap(kf_new, kf, kf_new.obs_depth, K), i)
                for i, kf in enumerate(others)]
    overlaps.sort(key=lambda t: (-t[0], t[1]))
    chosen = {i for _, i in overlaps[: config.overlap_keyframes]}
    n_random = min(config.random_keyframes, len(others))
    chosen.update(rng.permutation(len(others))[:n_random].tolist())
    return [kf_new] + [others[i] for i in sorted(chosen)]


def add_gaussians(frame_color: np.ndarray, frame_depth: np.ndarray, pose: Pose,
                  kf_id: int, submap: Submap, K: CameraIntrinsics,
                  config: SlamConfig) -> int:
    """Insert new Gaussians where the map fails to explain the frame.

    Trigger per pixel: rendered silhouette below threshold OR relative
    depth error above threshold.  New points back-project at observed
    depth with a one-pixel footprint.
    """
    stride = config.insert_pixel_stride
    out = render(submap.gaussians, pose, K)
    sil = out.silhouette[::stride, ::stride]
    rdepth = out.depth[::stride, ::stride]
    odepth = frame_depth[::stride, ::stride]
    ocolor = frame_color[::stride, ::stride]
    ys, xs = np.mgrid[0:K.height:stride, 0:K.width:stride]

    valid = (odepth > 0) & (odepth <= config.depth_threshold_m)
    uncovered = sil < config.insert_sil_threshold
    depth_err = np.abs(rdepth - odepth) > config.insert_depth_error * odepth
    mask = valid & (uncovered | depth_err)
    n = int(mask.sum())
    if n == 0:
        return 0

    px = np.stack([xs[mask], ys[mask]], axis=1).astype(np.float64)
    depths = odepth[mask]
    cam = unproject(px, depths, K)
    world = pose.inverse().apply(cam)
    colors = ocolor[mask]
    radii = depths / K.fx * stride
    submap.gaussians.append_arrays(world, colors, np.full(n, 0.5), np.full(n, kf_id),
                                   radius=radii)
    return n


@dataclass
class DensifyStats:
    """Accumulated positional-gradient statistics between densify events."""

    grad_sum: np.ndarray
    grad_dir: np.ndarray
    count: np.ndarray

    @staticmethod
    def for_map(gmap: GaussianMap) -> "DensifyStats":
        n = len(gmap)
        return DensifyStats(np.zeros(n), np.zeros((n, 3)), np.zeros(n))

    def update(self, d_mu: np.ndarray):
        norms = np.linalg.norm(d_mu, axis=1)
        seen = norms > 0
        self.grad_sum[seen] += norms[seen]
        self.grad_dir[seen] += d_mu[seen]
        self.count[seen] += 1

    def mean_grad(self) -> np.ndarray:
        return self.grad_sum / np.maximum(self.count, 1)


def densify_and_cull(submap: Submap, stats: DensifyStats, config: SlamConfig):
    """Clone high-gradient points, split oversized ones, cull transparent ones.

    Returns (cloned, split, culled) counts.  Works on isotropic and
    anisotropic maps (size proxy = radius or max scale component).
    """
    gmap = submap.gaussians
    n = len(gmap)
    if n == 0:
        return 0, 0, 0
    size = gmap.radius if gmap.mode == ISOTROPIC else gmap.scale.max(axis=1)
    median = np.median(size)
    mean_grad = stats.mean_grad()

    cull = gmap.opacity < config.cull_opacity
    split = (~cull) & (size > config.split_radius_factor * median)
    clone = (~cull) & (~split) & (mean_grad > config.densify_grad_threshold * config.scene_scale)

    keep = ~cull
    kept = gmap.select(keep)
    pieces = [kept]

    def offset_dirs(mask):
        d = stats.grad_dir[mask]
        norms = np.linalg.norm(d, axis=1, keepdims=True)
        fallback = np.tile([1.0, 0.0, 0.0], (mask.sum(), 1))
        return np.where(norms > 1e-12, d / np.maximum(norms, 1e-12), fallback)

    n_clone = int(clone.sum())
    if n_clone:
        twins = gmap.select(clone)
        size_c = size[clone][:, None]
        twins.mu = twins.mu + 0.05 * size_c * offset_dirs(clone)
        pieces.append(twins)

    n_split = int(split.sum())
    if n_split:
        halves = []
        direction = offset_dirs(split)
        for sgn in (1.0, -1.0):
            part = gmap.select(split)
            size_s = size[split][:, None]
            part.mu = part.mu + sgn * 0.5 * size_s * direction
            if gmap.mode == ISOTROPIC:
                part.radius = part.radius / config.split_shrink
            else:
                part.scale = part.scale / config.split_shrink
            halves.append(part)
        # the two halves replace the parent: drop parents from kept set
        parent_in_kept = split[keep]
        pieces[0] = kept.select(~parent_in_kept)
        pieces.extend(halves)

    merged = pieces[0]
    for extra in pieces[1:]:
        if gmap.mode == ISOTROPIC:
            merged.append_arrays(extra.mu, extra.color, extra.opacity, extra.owner,
                                 radius=extra.radius)
        else:
            merged.append_arrays(extra.mu, extra.color, extra.opacity, extra.owner,
                                 scale=extra.scale, quat=extra.quat)
    submap.gaussians = merged
    return n_clone, n_split, int(cull.sum())


class MapOptimizer:
    """Adam over Gaussian parameters with bounded reparameterizations.

    opacity runs through a logistic, radius/scale through log; color is
    clipped to [0, 1] after each step.  Poses are never touched.
    """

    def __init__(self, gmap: GaussianMap, config: SlamConfig):
        self.gmap = gmap
        self.config = config
        self.o_logit = logit(gmap.opacity)
        self.log_shape = np.log(gmap.radius if gmap.mode == ISOTROPIC else gmap.scale)
        self.states = {
            "mu": AdamState.like(gmap.mu),
            "color": AdamState.like(gmap.color),
            "opacity": AdamState.like(self.o_logit),
            "shape": AdamState.like(self.log_shape),
        }
        if gmap.mode == ANISOTROPIC:
            self.states["quat"] = AdamState.like(gmap.quat)

    def apply(self, grads, lambda_s: float = 0.0):
        cfg = self.config
        gmap = self.gmap
        d_shape = grads.d_radius if gmap.mode == ISOTROPIC else grads.d_scale
        if lambda_s > 0 and gmap.mode == ANISOTROPIC:
            _, d_reg = scale_regularization(gmap)
            d_shape = d_shape + lambda_s * d_reg
        shape_val = gmap.radius if gmap.mode == ISOTROPIC else gmap.scale

        gmap.mu, self.states["mu"], _ = adam_step(
            gmap.mu, grads.d_mu, self.states["mu"], cfg.lr_position * cfg.scene_scale)
        new_color, self.states["color"], _ = adam_step(
            gmap.color, grads.d_color, self.states["color"], cfg.lr_color)
        gmap.color = np.clip(new_color, 0.0, 1.0)
        self.o_logit, self.states["opacity"], _ = adam_step(
            self.o_logit, sigmoid_grad_chain(self.o_logit, grads.d_opacity),
            self.states["opacity"], cfg.lr_opacity)
        gmap.opacity = sigmoid(self.o_logit)
        self.log_shape, self.states["shape"], _ = adam_step(
            self.log_shape, d_shape * shape_val, self.states["shape"], cfg.lr_shape)
        if gmap.mode == ISOTROPIC:
            gmap.radius = np.exp(self.log_shape)
        else:
            gmap.scale = np.exp(self.log_shape)
            new_quat, self.states["quat"], _ = adam_step(
                gmap.quat, grads.d_quat, self.states["quat"], cfg.lr_shape)
            gmap.quat = new_quat / np.linalg.norm(new_quat, axis=1, keepdims=True)


def _mean_loss_over_views(gmap: GaussianMap, views, K, weights, max_depth):
    total = 0.0
    for kf in views:
        out = render(gmap, kf.pose, K)
        loss, _, _ = mapping_loss(out, kf.obs_color, kf.obs_depth, weights,
                                  max_depth=max_depth)
        total += loss
    return total / len(views)


def optimize_map(submap: Submap, selected: list, K: CameraIntrinsics,
                 config: SlamConfig, iters: Optional[int] = None) -> list:
    """Round-robin Adam refinement of the active map over selected views.

    Densifies/culls on the configured interval; restores the initial map
    if the final mean loss regressed (monotonic-by-bookkeeping contract).
    Returns the per-iteration loss trace.
    """
    iters = config.mapping_iters if iters is None else iters
    views = [kf for kf in selected if kf.has_buffers]
    if not views or len(submap.gaussians) == 0 or iters == 0:
        return []
    weights = config.loss_weights()
    max_depth = config.depth_threshold_m

    snapshot = submap.gaussians.copy()
    initial = _mean_loss_over_views(submap.gaussians, views, K, weights, max_depth)

    opt = MapOptimizer(submap.gaussians, config)
    stats = DensifyStats.for_map(submap.gaussians)
    trace = []
    for it in range(iters):
        kf = views[it % len(views)]
        out = render(submap.gaussians, kf.pose, K)
        loss, gc, gd = mapping_loss(out, kf.obs_color, kf.obs_depth, weights,
                                    max_depth=max_depth)
        trace.append(loss)
        grads = render_backward(submap.gaussians, kf.pose, K, gc, gd)
        stats.update(grads.d_mu)
        opt.apply(grads)
        if (it + 1) % config.densify_interval == 0 and it + 1 < iters:
            densify_and_cull(submap, stats, config)
            opt = MapOptimizer(submap.gaussians, config)
            stats = DensifyStats.for_map(submap.gaussians)

    final = _mean_loss_over_views(submap.gaussians, views, K, weights, max_depth)
    if final > initial:
        submap.gaussians = snapshot
        log.info("map optimization regressed (%.5f -> %.5f); restored snapshot",
                 initial, final)
    return trace


class SubmapManager:
    """Continuous submap lifecycle driven by trajectory length."""

    def __init__(self, config: SlamConfig):
        self.config = config
        self.submaps = [Submap(0)]
        self._last_center = None

    @property
    def active(self) -> Submap:
        return self.submaps[-1]

    def record_motion(self, pose: Pose):
        center = pose.inverse().t
        if self._last_center is not None:
            self.active.trajectory_length_m += float(np.linalg.norm(center - self._last_center))
        self._last_center = center

    def should_advance(self) -> bool:
        return self.active.trajectory_length_m >= self.config.submap_length_m

    def advance(self) -> Submap:
        """Freeze the active submap and start a new one sharing the boundary
        keyframe (same frame id and pose; buffers copied to the new submap)."""
        old = self.active
        boundary = old.keyframes[-1]
        new = Submap(old.submap_id + 1)
        twin = Keyframe(
            kf_id=boundary.kf_id, frame_id=boundary.frame_id,
            timestamp=boundary.timestamp, pose=boundary.pose.copy(),
            feature_set=boundary.feature_set, global_desc=boundary.global_desc,
            submap_id=new.submap_id, depth_snapshot=boundary.depth_snapshot,
            obs_color=boundary.obs_color, obs_depth=boundary.obs_depth,
        )
        new.add_keyframe(twin)
        old.freeze()
        self.submaps.append(new)
        return new

    def retained_buffer_count(self) -> int:
        return sum(sm.retained_buffer_count() for sm in self.submaps)
