"""Run configuration: every tunable of the pipeline in one validated record.

Config files are flat ``key = value`` text with ``#`` comments; unknown
keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from gslam.losses import LossWeights


@dataclass
class SlamConfig:
    # input cadence
    frame_stride: int = 1           # dataset frame subsampling (5 EuRoC / 2 KITTI scale)
    keyframe_stride: int = 5        # tracked frames per keyframe
    render_scale: float = 1.0       # tracking/mapping render resolution factor

    # submaps
    submap_length_m: float = 200.0

    # optimization budgets
    tracking_iters: int = 50
    mapping_iters: int = 100
    loop_iters: int = 100
    refine_iters: int = 500
    early_stop_rel: float = 1e-4    # relative improvement threshold
    early_stop_patience: int = 5

    # loss balance
    lambda_c: float = 1.0
    lambda_d: float = 0.2
    gamma: float = 10.0
    alpha: float = 10.0
    theta: float = 0.99
    lambda_s: float = 0.1           # flatness regularizer weight (refinement)
    depth_threshold_m: float = 30.0

    # features / prior pose
    feature_provider: str = "classical"   # classical | oracle
    max_keypoints: int = 512
    min_pnp_inliers: int = 30
    pnp_inlier_px: float = 2.0

    # learning rates
    lr_rot: float = 2e-3
    lr_trans: float = 1e-2
    lr_position: float = 1e-4       # multiplied by scene_scale
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_shape: float = 5e-3          # radius/scale, log-domain
    scene_scale: float = 1.0

    # mapping
    overlap_keyframes: int = 3      # top-overlap views per mapping step
    random_keyframes: int = 2       # forget-prevention views
    insert_sil_threshold: float = 0.5
    insert_depth_error: float = 0.1  # relative depth error triggering insertion
    insert_pixel_stride: int = 2
    densify_interval: int = 20
    densify_grad_threshold: float = 2e-4  # multiplied by scene_scale
    cull_opacity: float = 0.05
    split_radius_factor: float = 2.0
    split_shrink: float = 1.6

    # loop closure
    loop_top_k: int = 3
    min_loop_inliers: int = 50
    min_temporal_gap: int = 20
    reject_loss_threshold: float = 0.25
    loop_edge_weight: float = 1.0

    # pose graph
    pgo_max_iters: int = 100
    pgo_tol: float = 1e-8

    # reproducibility
    seed: int = 0

    # diagnostics: odometric drift injection for loop-closure evaluation
    drift_rot_deg_per_m: float = 0.0
    drift_trans_per_m: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        positive = ["frame_stride", "keyframe_stride", "render_scale", "submap_length_m",
                    "tracking_iters", "mapping_iters", "loop_iters",
                    "depth_threshold_m", "max_keypoints", "pnp_inlier_px",
                    "lr_rot", "lr_trans", "lr_position", "lr_color", "lr_opacity",
                    "lr_shape", "scene_scale", "insert_pixel_stride", "densify_interval",
                    "split_radius_factor", "split_shrink", "loop_top_k"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        nonneg = ["refine_iters", "lambda_c", "lambda_d", "gamma", "alpha", "lambda_s",
                  "min_pnp_inliers", "min_loop_inliers", "min_temporal_gap",
                  "reject_loss_threshold", "loop_edge_weight", "overlap_keyframes",
                  "random_keyframes", "drift_rot_deg_per_m", "drift_trans_per_m"]
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must be in [0, 1]")
        if not 0.0 <= self.cull_opacity <= 1.0:
            raise ValueError("cull_opacity must be in [0, 1]")
        if self.feature_provider not in ("classical", "oracle"):
            raise ValueError("feature_provider must be 'classical' or 'oracle'")

    def loss_weights(self) -> LossWeights:
        return LossWeights(lambda_c=self.lambda_c, lambda_d=self.lambda_d,
                           gamma=self.gamma, alpha=self.alpha, theta=self.theta)

    @staticmethod
    def from_file(path) -> "SlamConfig":
        text = Path(path).read_text()
        return SlamConfig.from_text(text)

    @staticmethod
    def from_text(text: str) -> "SlamConfig":
        fields = {f.name: f for f in dataclasses.fields(SlamConfig)}
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in fields:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            ftype = fields[key].type
            if ftype == "int":
                kwargs[key] = int(value)
            elif ftype == "float":
                kwargs[key] = float(value)
            else:
                kwargs[key] = value
        return SlamConfig(**kwargs)

    def to_text(self) -> str:
        lines = [f"{f.name} = {getattr(self, f.name)}" for f in dataclasses.fields(self)]
        return "\n".join(lines) + "\n"
