"""SE(3) pose algebra, pinhole projection, and stereo depth conversion.

Conventions used throughout the package:
  - A ``Pose`` maps points from its source frame to its target frame via
    ``x_tgt = R @ x_src + t``.  Camera poses are stored world->camera
    (``T_cw``) unless a variable name says otherwise.
  - Tangent vectors are 6-vectors ``(wx, wy, wz, vx, vy, vz)``: rotational
    part first, translational part second.
  - Updates use the right-perturbation convention ``T <- T @ exp(delta)``,
    so local Jacobians do not depend on the global pose magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation


class BehindCameraError(ValueError):
    """Point has non-positive depth along the optical axis."""


class InvalidDepthError(ValueError):
    """Depth value is not usable (zero or negative)."""


class IllConditionedError(ValueError):
    """Operation is numerically ill-conditioned (e.g. log at angle pi)."""


# Depth images use 0.0 as the invalid-depth sentinel (sky / unknown pixels).
INVALID_DEPTH = 0.0


class Pose:
    """Rigid SE(3) transform stored as unit quaternion + translation.

    The quaternion uses scipy's (x, y, z, w) component order and is
    re-normalized on construction so optimizer updates cannot accumulate
    drift away from the unit sphere.
    """

    __slots__ = ("q", "t")

    def __init__(self, quat_xyzw=None, translation=None):
        q = np.array([0.0, 0.0, 0.0, 1.0] if quat_xyzw is None else quat_xyzw, dtype=np.float64)
        if q.shape != (4,):
            raise ValueError("quaternion must have 4 components")
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n < 1e-12:
            raise ValueError("quaternion must be finite and nonzero")
        self.q = q / n
        self.t = np.zeros(3) if translation is None else np.asarray(translation, dtype=np.float64).copy()
        if self.t.shape != (3,):
            raise ValueError("translation must have 3 components")

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def from_rt(rotation: np.ndarray, translation) -> "Pose":
        """Build from a 3x3 rotation matrix and a 3-vector."""
        q = Rotation.from_matrix(np.asarray(rotation, dtype=np.float64)).as_quat()
        return Pose(q, translation)

    @staticmethod
    def from_matrix(matrix: np.ndarray) -> "Pose":
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError("expected a 4x4 homogeneous matrix")
        return Pose.from_rt(m[:3, :3], m[:3, 3])

    @property
    def rotation(self) -> np.ndarray:
        """3x3 rotation matrix."""
        return Rotation.from_quat(self.q).as_matrix()

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.t
        return m

    def compose(self, other: "Pose") -> "Pose":
        """Return self o other (apply ``other`` first, then ``self``)."""
        ra = Rotation.from_quat(self.q)
        q = (ra * Rotation.from_quat(other.q)).as_quat()
        return Pose(q, ra.apply(other.t) + self.t)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        rinv = Rotation.from_quat(self.q).inv()
        return Pose(rinv.as_quat(), -rinv.apply(self.t))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform a 3-vector or an (N, 3) array of points."""
        pts = np.asarray(points, dtype=np.float64)
        return Rotation.from_quat(self.q).apply(pts) + self.t

    def rotation_angle(self) -> float:
        """Rotation magnitude in radians, in [0, pi]."""
        return float(np.linalg.norm(Rotation.from_quat(self.q).as_rotvec()))

    def copy(self) -> "Pose":
        return Pose(self.q, self.t)

    def almost_equal(self, other: "Pose", tol: float = 1e-9) -> bool:
        dq = min(np.linalg.norm(self.q - other.q), np.linalg.norm(self.q + other.q))
        return dq < tol and np.linalg.norm(self.t - other.t) < tol

    def __repr__(self) -> str:
        return f"Pose(q={np.round(self.q, 6).tolist()}, t={np.round(self.t, 6).tolist()})"


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics for a rectified stereo pair."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    baseline: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0 or self.baseline <= 0:
            raise ValueError("fx, fy, baseline must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def scaled(self, scale: float) -> "CameraIntrinsics":
        """Intrinsics for an image resized by ``scale`` in both dimensions."""
        return CameraIntrinsics(
            fx=self.fx * scale,
            fy=self.fy * scale,
            cx=self.cx * scale,
            cy=self.cy * scale,
            width=max(1, int(round(self.width * scale))),
            height=max(1, int(round(self.height * scale))),
            baseline=self.baseline,
        )


def project(point: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Project camera-frame points to pixels; raises if any depth <= 0.

    Accepts a single 3-vector or an (N, 3) array.  The result may lie
    outside the image bounds; clipping is the caller's concern.
    """
    p = np.asarray(point, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    z = p[:, 2]
    if np.any(z <= 0):
        raise BehindCameraError("point has non-positive depth")
    uv = np.stack([K.fx * p[:, 0] / z + K.cx, K.fy * p[:, 1] / z + K.cy], axis=-1)
    return uv[0] if single else uv


def unproject(pixel: np.ndarray, depth, K: CameraIntrinsics) -> np.ndarray:
    """Back-project pixels at the given metric depth into the camera frame."""
    px = np.asarray(pixel, dtype=np.float64)
    single = px.ndim == 1
    px = np.atleast_2d(px)
    d = np.atleast_1d(np.asarray(depth, dtype=np.float64))
    if np.any(d <= 0):
        raise InvalidDepthError("depth must be positive")
    pts = np.stack(
        [(px[:, 0] - K.cx) * d / K.fx, (px[:, 1] - K.cy) * d / K.fy, d], axis=-1
    )
    return pts[0] if single else pts


def disparity_to_depth(disparity: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Convert stereo disparity (pixels) to metric depth.

    Non-positive disparities (sky, unmatched pixels) map to the 0.0
    invalid-depth sentinel rather than raising.
    """
    disp = np.asarray(disparity, dtype=np.float64)
    depth = np.zeros_like(disp)
    valid = disp > 0
    np.divide(K.fx * K.baseline, disp, out=depth, where=valid)
    return depth


def _so3_left_jacobian(omega: np.ndarray) -> np.ndarray:
    """V matrix coupling rotation and translation in the SE(3) exponential."""
    angle = np.linalg.norm(omega)
    W = skew(omega)
    if angle < 1e-8:
        return np.eye(3) + 0.5 * W + W @ W / 6.0
    a2 = angle * angle
    return (
        np.eye(3)
        + (1.0 - np.cos(angle)) / a2 * W
        + (angle - np.sin(angle)) / (a2 * angle) * (W @ W)
    )


def _so3_left_jacobian_inv(omega: np.ndarray) -> np.ndarray:
    angle = np.linalg.norm(omega)
    W = skew(omega)
    if angle < 1e-8:
        return np.eye(3) - 0.5 * W + W @ W / 12.0
    half = 0.5 * angle
    cot_term = 1.0 / (angle * angle) - np.cos(half) / (2.0 * angle * np.sin(half))
    return np.eye(3) - 0.5 * W + cot_term * (W @ W)


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def se3_exp(tangent: np.ndarray) -> Pose:
    """SE(3) exponential map: tangent (wx, wy, wz, vx, vy, vz) -> Pose."""
    v = np.asarray(tangent, dtype=np.float64)
    if v.shape != (6,):
        raise ValueError("tangent must be a 6-vector")
    omega, rho = v[:3], v[3:]
    q = Rotation.from_rotvec(omega).as_quat()
    t = _so3_left_jacobian(omega) @ rho
    return Pose(q, t)


def se3_log(pose: Pose) -> np.ndarray:
    """SE(3) logarithm; raises for rotations within 1e-6 of angle pi."""
    omega = Rotation.from_quat(pose.q).as_rotvec()
    angle = np.linalg.norm(omega)
    if angle > np.pi - 1e-6:
        raise IllConditionedError("se3_log is ill-conditioned at rotation angle pi")
    rho = _so3_left_jacobian_inv(omega) @ pose.t
    return np.concatenate([omega, rho])


def adjoint(pose: Pose) -> np.ndarray:
    """6x6 adjoint: exp(adjoint(T) @ v) = T @ exp(v) @ T^-1.

    Block layout matches the (rotation, translation) tangent ordering.
    """
    R = pose.rotation
    A = np.zeros((6, 6))
    A[:3, :3] = R
    A[3:, :3] = skew(pose.t) @ R
    A[3:, 3:] = R
    return A


def interpolate_pose(a: Pose, b: Pose, alpha: float) -> Pose:
    """Geodesic interpolation from a (alpha=0) to b (alpha=1)."""
    rel = a.inverse() @ b
    return a @ se3_exp(alpha * se3_log(rel))
