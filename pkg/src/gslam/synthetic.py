"""Synthetic scenes and trajectories for verification.

A scene is a ground-truth Gaussian map, a landmark set for the oracle
feature provider, and a camera trajectory; observations are produced by
rendering the ground truth, so every stage of the pipeline can be checked
against exact references.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from gslam.geometry import CameraIntrinsics, Pose
from gslam.render import GaussianMap, render

SCENE_KINDS = ("room", "street", "figure_eight")


@dataclass
class SceneSpec:
    kind: str
    n_gaussians: int = 1500
    path_length: float = 40.0
    texture: float = 1.0       # color contrast; low values make weak texture
    n_frames: Optional[int] = None

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ValueError(f"unknown scene kind {self.kind!r}; choose from {SCENE_KINDS}")
        if self.n_gaussians <= 0:
            raise ValueError("n_gaussians must be positive")
        if self.path_length <= 0:
            raise ValueError("path_length must be positive")


@dataclass
class SyntheticScene:
    gaussians: GaussianMap
    landmarks: np.ndarray              # (L, 3) world points with implicit ids
    trajectory: list                   # [(timestamp, Pose world->camera)]
    K: CameraIntrinsics
    spec: SceneSpec
    seed: int

    def observe(self, pose: Pose, K: Optional[CameraIntrinsics] = None):
        """Ground-truth observation: rendered color + depth (0 = invalid)."""
        K = K or self.K
        out = render(self.gaussians, pose, K)
        depth = np.where(out.silhouette > 0.5, out.depth, 0.0)
        return np.clip(out.color, 0.0, 1.0), depth


def _texture_color(points: np.ndarray, rng: np.random.Generator, amplitude: float) -> np.ndarray:
    """Smooth multi-frequency color field over 3D positions."""
    color = np.full((len(points), 3), 0.5)
    for _ in range(4):
        k = rng.uniform(0.5, 3.0, size=3)
        phase = rng.uniform(0, 2 * np.pi, size=3)
        weight = rng.uniform(0.05, 0.2, size=3) * amplitude
        arg = points @ k
        color += weight * np.sin(arg[:, None] + phase)
    return np.clip(color, 0.05, 0.95)


def _look_at_pose(eye: np.ndarray, target: np.ndarray, up=np.array([0.0, 0.0, 1.0])) -> Pose:
    """World->camera pose with +z toward the target (z-up world)."""
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        right = np.array([1.0, 0.0, 0.0])
    else:
        right /= nr
    down = np.cross(fwd, right)
    R_wc = np.stack([right, down, fwd], axis=1)  # camera axes in world coords
    R_cw = R_wc.T
    return Pose.from_rt(R_cw, -R_cw @ eye)


def _camera() -> CameraIntrinsics:
    return CameraIntrinsics(fx=96.0, fy=96.0, cx=63.5, cy=47.5,
                            width=128, height=96, baseline=0.2)


def _wall_points(rng, corners, n, jitter=0.05):
    """Sample n points on the quad spanned by corners (p0, p1, p2)."""
    p0, p1, p2 = (np.asarray(c, dtype=np.float64) for c in corners)
    a = rng.uniform(0, 1, n)
    b = rng.uniform(0, 1, n)
    pts = p0 + a[:, None] * (p1 - p0) + b[:, None] * (p2 - p0)
    return pts + rng.normal(0, jitter, pts.shape)


def generate_scene(seed: int, spec: SceneSpec) -> SyntheticScene:
    """Deterministic scene from a seed; see SceneSpec for knobs."""
    rng = np.random.default_rng(seed)
    K = _camera()
    if spec.kind == "room":
        scene = _room(rng, spec, K)
    elif spec.kind == "street":
        scene = _street(rng, spec, K)
    else:
        scene = _figure_eight(rng, spec, K)
    scene.seed = seed
    return scene


def _make_map(points, rng, spec, spacing):
    color = _texture_color(points, rng, spec.texture)
    opacity = rng.uniform(0.7, 0.95, len(points))
    # sharp surfaces: footprints just touching their neighbors
    radius = np.full(len(points), 0.4 * spacing) * rng.uniform(0.85, 1.2, len(points))
    return GaussianMap.from_arrays(points, color, opacity, np.zeros(len(points)),
                                   radius=radius)


def _room(rng, spec: SceneSpec, K) -> SyntheticScene:
    # camera orbits the room center looking outward at the walls
    orbit_r = spec.path_length / (2 * np.pi)
    half = orbit_r + 2.5
    height = 3.0
    if half > 50.0:
        raise ValueError("path longer than a feasible room")
    n = spec.n_gaussians
    per_wall = n // 6
    walls = [
        [(-half, -half, 0), (half, -half, 0), (-half, -half, height)],
        [(-half, half, 0), (half, half, 0), (-half, half, height)],
        [(-half, -half, 0), (-half, half, 0), (-half, -half, height)],
        [(half, -half, 0), (half, half, 0), (half, -half, height)],
        [(-half, -half, 0), (half, -half, 0), (-half, half, 0)],          # floor
        [(-half, -half, height), (half, -half, height), (-half, half, height)],
    ]
    pts = np.concatenate([
        _wall_points(rng, w, per_wall if i < 5 else n - 5 * per_wall)
        for i, w in enumerate(walls)
    ])
    # floor/ceiling points right under the orbit pass centimeters from the
    # camera; they are never usefully visible, only expensive
    radial = np.linalg.norm(pts[:, :2], axis=1)
    near_track = (np.abs(radial - orbit_r) < 1.2) & ((pts[:, 2] < 0.4) | (pts[:, 2] > height - 0.4))
    pts = pts[~near_track]
    area = 4 * (2 * half * height) + 2 * (2 * half) ** 2
    spacing = np.sqrt(area / n)
    gmap = _make_map(pts, rng, spec, spacing)

    n_frames = spec.n_frames or max(8, int(round(spec.path_length / 0.25)))
    traj = []
    for i in range(n_frames):
        ang = 2 * np.pi * i / n_frames
        eye = np.array([orbit_r * np.cos(ang), orbit_r * np.sin(ang), height / 2])
        target = np.array([(orbit_r + 2) * np.cos(ang), (orbit_r + 2) * np.sin(ang), height / 2])
        traj.append((0.1 * i, _look_at_pose(eye, target)))

    n_lm = max(8000, 2 * n)
    landmarks = np.concatenate([
        _wall_points(rng, w, n_lm // 6, jitter=0.02) for w in walls
    ])
    return SyntheticScene(gmap, landmarks, traj, K, spec, 0)


def _street(rng, spec: SceneSpec, K) -> SyntheticScene:
    length = spec.path_length + 10.0
    width, height = 8.0, 4.0
    n = spec.n_gaussians
    per = n // 3
    quads = [
        [(0, -width / 2, 0), (length, -width / 2, 0), (0, -width / 2, height)],
        [(0, width / 2, 0), (length, width / 2, 0), (0, width / 2, height)],
        [(0, -width / 2, 0), (length, -width / 2, 0), (0, width / 2, 0)],   # ground
    ]
    pts = np.concatenate([
        _wall_points(rng, q, per if i < 2 else n - 2 * per) for i, q in enumerate(quads)
    ])
    area = 2 * length * height + length * width
    spacing = np.sqrt(area / n)
    gmap = _make_map(pts, rng, spec, spacing)

    n_frames = spec.n_frames or max(8, int(round(spec.path_length / 0.5)))
    traj = []
    for i in range(n_frames):
        x = spec.path_length * i / max(n_frames - 1, 1)
        eye = np.array([x, 0.0, 1.5])
        target = eye + np.array([4.0, 0.0, 0.0])
        traj.append((0.1 * i, _look_at_pose(eye, target)))

    n_lm = max(8000, 2 * n)
    landmarks = np.concatenate([
        _wall_points(rng, q, n_lm // 3, jitter=0.02) for q in quads
    ])
    return SyntheticScene(gmap, landmarks, traj, K, spec, 0)


def _lemniscate(A: float, t: np.ndarray) -> np.ndarray:
    # Gerono lemniscate; passes through the origin twice per period
    return np.stack([A * np.sin(t), A * np.sin(t) * np.cos(t)], axis=1)


def _figure_eight(rng, spec: SceneSpec, K) -> SyntheticScene:
    # size the lemniscate so the closed path has the requested length
    ts = np.linspace(0, 2 * np.pi, 4096)
    unit = _lemniscate(1.0, ts)
    unit_len = np.linalg.norm(np.diff(unit, axis=0), axis=1).sum()
    A = spec.path_length / unit_len

    n_frames = spec.n_frames or max(16, int(round(spec.path_length / 1.0)))
    # equal-arclength parameterization
    seg = np.linalg.norm(np.diff(_lemniscate(A, ts), axis=0), axis=1)
    arc = np.concatenate([[0], np.cumsum(seg)])
    targets = np.linspace(0, arc[-1], n_frames)
    t_at = np.interp(targets, arc, ts)

    path = _lemniscate(A, t_at)
    traj = []
    for i in range(n_frames):
        t = t_at[i]
        vel = np.array([np.cos(t), np.cos(2 * t)])
        vel = vel / np.linalg.norm(vel)
        eye = np.array([path[i, 0], path[i, 1], 1.5])
        target = eye + np.array([vel[0], vel[1], 0.0]) * 4.0
        traj.append((0.1 * i, _look_at_pose(eye, target)))

    # scenery: clusters of structure flanking the path + ground strip
    n = spec.n_gaussians
    n_side = (2 * n) // 3
    dense_t = np.interp(np.linspace(0, arc[-1], n_side), arc, ts)
    dense = _lemniscate(A, dense_t)
    normal_t = np.stack([-np.cos(2 * dense_t), np.cos(dense_t)], axis=1)
    normal_t /= np.linalg.norm(normal_t, axis=1, keepdims=True)
    side = rng.choice([-1.0, 1.0], n_side)
    offset = rng.uniform(3.0, 7.0, n_side)
    pts_side = np.concatenate([
        dense + normal_t * (side * offset)[:, None],
        rng.uniform(0.0, 3.5, (n_side, 1)),
    ], axis=1)
    n_ground = n - n_side
    g_t = np.interp(rng.uniform(0, arc[-1], n_ground), arc, ts)
    g_path = _lemniscate(A, g_t)
    pts_ground = np.concatenate([
        g_path + rng.normal(0, 1.5, (n_ground, 2)),
        np.zeros((n_ground, 1)),
    ], axis=1)
    pts = np.concatenate([pts_side, pts_ground])

    spacing = np.sqrt(spec.path_length * 12.0 / n)
    gmap = _make_map(pts, rng, spec, spacing)
    # landmarks resample the same corridor structure, denser
    n_lm = max(10000, 2 * n)
    lm_t = np.interp(np.linspace(0, arc[-1], n_lm), arc, ts)
    lm = _lemniscate(A, lm_t)
    lm_n = np.stack([-np.cos(2 * lm_t), np.cos(lm_t)], axis=1)
    lm_n /= np.linalg.norm(lm_n, axis=1, keepdims=True)
    lm_side = rng.choice([-1.0, 1.0], n_lm)
    lm_off = rng.uniform(3.0, 7.0, n_lm)
    landmarks = np.concatenate([
        lm + lm_n * (lm_side * lm_off)[:, None],
        rng.uniform(0.0, 3.5, (n_lm, 1)),
    ], axis=1)
    return SyntheticScene(gmap, landmarks, traj, K, spec, 0)


def count_visible_landmarks(scene: SyntheticScene, pose: Pose) -> int:
    cam = pose.apply(scene.landmarks)
    z = cam[:, 2]
    vis = z > 0.05
    K = scene.K
    u = K.fx * cam[:, 0] / np.where(vis, z, 1.0) + K.cx
    v = K.fy * cam[:, 1] / np.where(vis, z, 1.0) + K.cy
    vis &= (u >= 0) & (u <= K.width - 1) & (v >= 0) & (v <= K.height - 1)
    return int(vis.sum())
