"""2D feature providers and classical pose solvers.

Two interchangeable providers feed tracking and loop closure:

  - ``ClassicalFeatureProvider``: multi-scale Harris corners with binary
    intensity-comparison descriptors and a downsampled-image + gradient
    histogram global descriptor.  No learned models, fully deterministic.
  - ``OracleFeatureProvider``: for synthetic scenes; "detects" the exact
    projections of ground-truth landmarks and describes them by landmark
    identity, optionally with injected noise and outliers.  Isolates
    geometry/optimization correctness from feature quality in tests.

Also hosts PnP-RANSAC and point-to-plane ICP used for prior pose
estimation and loop constraints.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import cv2
import numpy as np
from scipy.spatial import cKDTree

from gslam.geometry import CameraIntrinsics, Pose, se3_exp, skew

MAX_KEYPOINTS = 512
LOWE_RATIO = 0.8

# fixed intensity-comparison pattern: 256 point pairs in a 15x15 patch
_PATTERN_RNG = np.random.default_rng(871225)
_PATTERN = np.clip(np.round(_PATTERN_RNG.normal(0, 2.6, size=(256, 4))), -7, 7).astype(np.int64)
_PATCH_MARGIN = 9


@dataclass
class FeatureSet:
    """Keypoints + unit-norm descriptors for one image."""

    keypoints: np.ndarray          # (N, 2) subpixel (u, v)
    descriptors: np.ndarray        # (N, D), rows unit L2 norm
    image_id: int = -1
    ids: Optional[np.ndarray] = None     # landmark identities (oracle only)
    depths: Optional[np.ndarray] = None  # exact keypoint depths (oracle only)

    def __len__(self) -> int:
        return self.keypoints.shape[0]


@dataclass
class MatchSet:
    """Index pairs between two feature sets; unique in both columns."""

    pairs: np.ndarray              # (M, 2) int indices (idx_a, idx_b)
    inliers: np.ndarray            # (M,) bool, refined after RANSAC

    def __len__(self) -> int:
        return self.pairs.shape[0]

    @staticmethod
    def empty() -> "MatchSet":
        return MatchSet(np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=bool))


def _to_gray(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    return img.mean(axis=2) if img.ndim == 3 else img


def match(a: FeatureSet, b: FeatureSet, ratio: float = LOWE_RATIO) -> MatchSet:
    """Mutual nearest-neighbor matching with Lowe's ratio test."""
    if len(a) == 0 or len(b) == 0:
        return MatchSet.empty()
    sim = a.descriptors @ b.descriptors.T
    d2 = np.maximum(2.0 - 2.0 * sim, 0.0)

    best_b = np.argmin(d2, axis=1)
    best_a = np.argmin(d2, axis=0)
    pairs = []
    for i, j in enumerate(best_b):
        if best_a[j] != i:
            continue
        d_best = d2[i, j]
        row = d2[i].copy()
        row[j] = np.inf
        d_second = row.min() if len(b) > 1 else np.inf
        if np.sqrt(d_best) < ratio * np.sqrt(d_second):
            pairs.append((i, j))
    if not pairs:
        return MatchSet.empty()
    p = np.array(pairs, dtype=np.int64)
    return MatchSet(p, np.ones(p.shape[0], dtype=bool))


def dense_feature_map(image: np.ndarray) -> np.ndarray:
    """16-channel oriented-gradient response image, unit per pixel.

    4 orientations x 2 scales x 2 signs; a dense, bilinear-sampleable
    stand-in for a learned descriptor map in the feature-map warping loss.
    """
    gray = _to_gray(image)
    channels = []
    for sigma in (1.0, 2.0):
        blurred = cv2.GaussianBlur(gray, (0, 0), sigma)
        gy, gx = np.gradient(blurred)
        for theta in (0.0, np.pi / 4, np.pi / 2, 3 * np.pi / 4):
            resp = np.cos(theta) * gx + np.sin(theta) * gy
            channels.append(np.maximum(resp, 0.0))
            channels.append(np.maximum(-resp, 0.0))
    fmap = np.stack(channels, axis=2)
    norm = np.linalg.norm(fmap, axis=2, keepdims=True)
    return fmap / np.maximum(norm, 1e-8)


# ---------------------------------------------------------------------------
# classical provider
# ---------------------------------------------------------------------------

class ClassicalFeatureProvider:
    """Harris corners + binary descriptors; zero external models."""

    def __init__(self, max_keypoints: int = MAX_KEYPOINTS, octaves: int = 3,
                 harris_k: float = 0.04, response_floor: float = 0.01):
        self.max_keypoints = max_keypoints
        self.octaves = octaves
        self.harris_k = harris_k
        self.response_floor = response_floor

    def detect_and_describe(self, image: np.ndarray, pose: Optional[Pose] = None,
                            depth: Optional[np.ndarray] = None,
                            image_id: int = -1) -> FeatureSet:
        gray = _to_gray(image)
        kps, resp, descs = [], [], []
        level = gray
        for octave in range(self.octaves):
            if min(level.shape) < 2 * _PATCH_MARGIN + 3:
                break
            k, r = self._harris(level)
            if len(k):
                d, keep = self._describe(level, k)
                k, r = k[keep], r[keep]
                # 2x area downsampling maps coarse center x to fine 2x + 0.5
                scale = 2.0 ** octave
                kps.append(k * scale + (scale - 1.0) / 2.0)
                resp.append(r)
                descs.append(d)
            level = cv2.resize(level, (level.shape[1] // 2, level.shape[0] // 2),
                               interpolation=cv2.INTER_AREA)
        if not kps:
            return FeatureSet(np.zeros((0, 2)), np.zeros((0, 256)), image_id)
        keypoints = np.concatenate(kps)
        responses = np.concatenate(resp)
        descriptors = np.concatenate(descs)
        order = np.lexsort((np.arange(len(responses)), -responses))[: self.max_keypoints]
        return FeatureSet(keypoints[order], descriptors[order], image_id)

    def _harris(self, gray: np.ndarray):
        g32 = gray.astype(np.float32)
        R = cv2.cornerHarris(g32, blockSize=3, ksize=3, k=self.harris_k)
        peak = float(R.max())
        if peak <= 1e-12:
            return np.zeros((0, 2)), np.zeros(0)
        local_max = (R == cv2.dilate(R, np.ones((3, 3), np.uint8))) & (R > self.response_floor * peak)
        ys, xs = np.nonzero(local_max)
        # sub-pixel refinement by 1D parabola fits along each axis
        u = xs.astype(np.float64)
        v = ys.astype(np.float64)
        interior = (xs > 0) & (xs < R.shape[1] - 1) & (ys > 0) & (ys < R.shape[0] - 1)
        xi, yi = xs[interior], ys[interior]
        dx = R[yi, xi + 1] - R[yi, xi - 1]
        ddx = 2 * R[yi, xi] - R[yi, xi + 1] - R[yi, xi - 1]
        dy = R[yi + 1, xi] - R[yi - 1, xi]
        ddy = 2 * R[yi, xi] - R[yi + 1, xi] - R[yi - 1, xi]
        with np.errstate(divide="ignore", invalid="ignore"):
            ou = np.where(np.abs(ddx) > 1e-12, 0.5 * dx / ddx, 0.0)
            ov = np.where(np.abs(ddy) > 1e-12, 0.5 * dy / ddy, 0.0)
        u[interior] += np.clip(ou, -0.5, 0.5)
        v[interior] += np.clip(ov, -0.5, 0.5)
        return np.stack([u, v], axis=1), R[ys, xs].astype(np.float64)

    def _describe(self, gray: np.ndarray, keypoints: np.ndarray):
        h, w = gray.shape
        blurred = cv2.GaussianBlur(gray, (0, 0), 2.0)
        xi = np.round(keypoints[:, 0]).astype(np.int64)
        yi = np.round(keypoints[:, 1]).astype(np.int64)
        keep = ((xi >= _PATCH_MARGIN) & (xi < w - _PATCH_MARGIN)
                & (yi >= _PATCH_MARGIN) & (yi < h - _PATCH_MARGIN))
        xi, yi = xi[keep], yi[keep]
        if xi.size == 0:
            return np.zeros((0, 256)), keep
        p = _PATTERN
        a = blurred[yi[:, None] + p[:, 1], xi[:, None] + p[:, 0]]
        b = blurred[yi[:, None] + p[:, 3], xi[:, None] + p[:, 2]]
        bits = (a < b).astype(np.float64)
        return (2.0 * bits - 1.0) / 16.0, keep

    def global_descriptor(self, image: np.ndarray, pose: Optional[Pose] = None) -> np.ndarray:
        gray = _to_gray(image)
        blurred = cv2.GaussianBlur(gray, (0, 0), 2.0)
        thumb = cv2.resize(blurred, (8, 8), interpolation=cv2.INTER_AREA).ravel()
        thumb = thumb - thumb.mean()
        tn = np.linalg.norm(thumb)
        if tn > 1e-9:
            thumb = thumb / tn

        gy, gx = np.gradient(blurred)
        mag = np.hypot(gx, gy).ravel()
        ang = np.arctan2(gy, gx).ravel() % (2 * np.pi)
        hist, _ = np.histogram(ang, bins=32, range=(0, 2 * np.pi), weights=mag)
        hn = np.linalg.norm(hist)
        if hn > 1e-9:
            hist = hist / hn

        desc = np.concatenate([thumb, hist])
        n = np.linalg.norm(desc)
        if n < 1e-9:
            desc = np.full(96, 1.0)
            n = np.linalg.norm(desc)
        return desc / n


# ---------------------------------------------------------------------------
# oracle provider (synthetic scenes)
# ---------------------------------------------------------------------------

class OracleFeatureProvider:
    """Detects exact ground-truth landmark projections; matches by identity.

    Descriptors are fixed random unit vectors per landmark id, so the
    generic mutual-NN matcher recovers identity matches.  Optional pixel
    noise and outlier injection exercise robust estimation paths.
    """

    def __init__(self, landmarks: np.ndarray, K: CameraIntrinsics, seed: int = 0,
                 pixel_noise: float = 0.0, outlier_rate: float = 0.0,
                 descriptor_dim: int = 64, max_keypoints: int = MAX_KEYPOINTS):
        self.landmarks = np.asarray(landmarks, dtype=np.float64)
        self.K = K
        self.seed = seed
        self.pixel_noise = pixel_noise
        self.outlier_rate = outlier_rate
        self.max_keypoints = max_keypoints
        drng = np.random.default_rng(seed + 7777)
        desc = drng.normal(size=(len(self.landmarks), descriptor_dim))
        self._desc = desc / np.linalg.norm(desc, axis=1, keepdims=True)

    def detect_and_describe(self, image: np.ndarray, pose: Optional[Pose] = None,
                            depth: Optional[np.ndarray] = None,
                            image_id: int = -1) -> FeatureSet:
        if pose is None:
            raise ValueError("oracle provider needs the camera pose")
        K = self.K
        cam = pose.apply(self.landmarks)
        z = cam[:, 2]
        vis = z > 0.05
        u = np.where(vis, K.fx * cam[:, 0] / np.where(vis, z, 1.0) + K.cx, -1)
        v = np.where(vis, K.fy * cam[:, 1] / np.where(vis, z, 1.0) + K.cy, -1)
        vis &= (u >= 1) & (u <= K.width - 2) & (v >= 1) & (v <= K.height - 2)
        ids = np.nonzero(vis)[0]
        px = np.stack([u[ids], v[ids]], axis=1)

        rng = np.random.default_rng((self.seed, max(image_id, 0), 15731))
        if self.pixel_noise > 0 and len(ids):
            px = px + rng.normal(0, self.pixel_noise, size=px.shape)
        if self.outlier_rate > 0 and len(ids):
            bad = rng.random(len(ids)) < self.outlier_rate
            px[bad, 0] = rng.uniform(0, K.width - 1, size=int(bad.sum()))
            px[bad, 1] = rng.uniform(0, K.height - 1, size=int(bad.sum()))

        if len(ids) > self.max_keypoints:
            ids = ids[: self.max_keypoints]
            px = px[: self.max_keypoints]
        return FeatureSet(px, self._desc[ids], image_id, ids=ids, depths=z[ids])

    def global_descriptor(self, image: np.ndarray, pose: Optional[Pose] = None) -> np.ndarray:
        if pose is None:
            raise ValueError("oracle provider needs the camera pose")
        fs = self.detect_and_describe(image, pose=pose, image_id=0)
        dim = 128
        vec = np.zeros(dim)
        for lid in (fs.ids if fs.ids is not None else []):
            r = np.random.default_rng((8191, int(lid)))
            vec += r.choice([-1.0, 1.0], size=dim)
        n = np.linalg.norm(vec)
        if n < 1e-9:
            vec = np.full(dim, 1.0)
            n = np.linalg.norm(vec)
        return vec / n


def make_provider(name: str, **kwargs):
    if name == "classical":
        return ClassicalFeatureProvider()
    if name == "oracle":
        return OracleFeatureProvider(**kwargs)
    raise ValueError(f"unknown feature provider {name!r}")


# ---------------------------------------------------------------------------
# PnP-RANSAC
# ---------------------------------------------------------------------------

@dataclass
class PnPResult:
    pose: Pose                 # input frame -> camera frame
    inliers: np.ndarray        # (N,) bool
    num_inliers: int


def _reprojection_errors(points3d, pixels, K, pose: Pose) -> np.ndarray:
    cam = pose.apply(points3d)
    z = cam[:, 2]
    ok = z > 1e-6
    uv = np.empty_like(pixels)
    uv[ok, 0] = K.fx * cam[ok, 0] / z[ok] + K.cx
    uv[ok, 1] = K.fy * cam[ok, 1] / z[ok] + K.cy
    err = np.full(len(points3d), np.inf)
    err[ok] = np.linalg.norm(uv[ok] - pixels[ok], axis=1)
    return err


def _solve_epnp(points3d, pixels, K) -> Optional[Pose]:
    cam_mat = np.array([[K.fx, 0, K.cx], [0, K.fy, K.cy], [0, 0, 1.0]])
    try:
        ok, rvec, tvec = cv2.solvePnP(
            points3d.reshape(-1, 1, 3), pixels.reshape(-1, 1, 2), cam_mat, None,
            flags=cv2.SOLVEPNP_EPNP)
    except cv2.error:
        return None
    if not ok or not np.all(np.isfinite(rvec)) or not np.all(np.isfinite(tvec)):
        return None
    return Pose.from_rt(cv2.Rodrigues(rvec)[0], tvec.ravel())


def refine_pose_gauss_newton(points3d, pixels, K, pose: Pose, iters: int = 10) -> Pose:
    """Iterative reprojection-error minimization (right-perturbation GN)."""
    pts = np.asarray(points3d, dtype=np.float64)
    px = np.asarray(pixels, dtype=np.float64)
    T = pose.copy()
    for _ in range(iters):
        R = T.rotation
        cam = pts @ R.T + T.t
        z = cam[:, 2]
        ok = z > 1e-6
        if ok.sum() < 3:
            break
        x, y, zz = cam[ok, 0], cam[ok, 1], cam[ok, 2]
        res = np.stack([K.fx * x / zz + K.cx - px[ok, 0],
                        K.fy * y / zz + K.cy - px[ok, 1]], axis=1)
        # d(pixel)/d(cam point)
        Jp = np.zeros((ok.sum(), 2, 3))
        Jp[:, 0, 0] = K.fx / zz
        Jp[:, 0, 2] = -K.fx * x / zz ** 2
        Jp[:, 1, 1] = K.fy / zz
        Jp[:, 1, 2] = -K.fy * y / zz ** 2
        # d(cam point)/d(tangent): [-R [p]x | R]
        Jx = np.zeros((ok.sum(), 3, 6))
        P = pts[ok]
        Sk = np.zeros((ok.sum(), 3, 3))
        Sk[:, 0, 1] = -P[:, 2]
        Sk[:, 0, 2] = P[:, 1]
        Sk[:, 1, 0] = P[:, 2]
        Sk[:, 1, 2] = -P[:, 0]
        Sk[:, 2, 0] = -P[:, 1]
        Sk[:, 2, 1] = P[:, 0]
        Jx[:, :, :3] = -np.einsum("ij,njk->nik", R, Sk)
        Jx[:, :, 3:] = R
        J = np.einsum("nij,njk->nik", Jp, Jx).reshape(-1, 6)
        r = res.reshape(-1)
        H = J.T @ J + 1e-12 * np.eye(6)
        g = J.T @ r
        try:
            delta = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        T = T @ se3_exp(delta)
        if np.linalg.norm(delta) < 1e-12:
            break
    return T


def pnp_ransac(points3d: np.ndarray, pixels: np.ndarray, K: CameraIntrinsics,
               inlier_px: float = 2.0, confidence: float = 0.999,
               max_iters: int = 1000, rng: Optional[np.random.Generator] = None
               ) -> Optional[PnPResult]:
    """Robust camera pose from 2D-3D correspondences.

    Returns None on fewer than 4 points or a degenerate configuration.
    """
    pts = np.asarray(points3d, dtype=np.float64)
    px = np.asarray(pixels, dtype=np.float64)
    n = len(pts)
    if n < 4 or len(px) != n:
        return None
    rng = rng or np.random.default_rng(0)

    sample_size = min(6, n)
    best_pose, best_inliers = None, None
    best_count = 0
    iters_needed = max_iters
    it = 0
    while it < min(iters_needed, max_iters):
        it += 1
        sel = rng.choice(n, size=sample_size, replace=False) if n > sample_size \
            else np.arange(n)
        pose = _solve_epnp(pts[sel], px[sel], K)
        if pose is None:
            continue
        err = _reprojection_errors(pts, px, K, pose)
        inl = err < inlier_px
        count = int(inl.sum())
        if count > best_count:
            best_count, best_pose, best_inliers = count, pose, inl
            w = count / n
            if w > 0:
                denom = np.log(max(1e-12, 1.0 - w ** sample_size))
                if denom < 0:
                    iters_needed = int(np.ceil(np.log(1.0 - confidence) / denom))
        if n == sample_size:
            break
    if best_pose is None or best_count < 4:
        return None

    refined = refine_pose_gauss_newton(pts[best_inliers], px[best_inliers], K, best_pose)
    err = _reprojection_errors(pts, px, K, refined)
    inl = err < inlier_px
    if inl.sum() >= 4:
        refined = refine_pose_gauss_newton(pts[inl], px[inl], K, refined)
        err = _reprojection_errors(pts, px, K, refined)
        inl = err < inlier_px
    if inl.sum() < 4:
        return None
    return PnPResult(refined, inl, int(inl.sum()))


# ---------------------------------------------------------------------------
# point-to-plane ICP
# ---------------------------------------------------------------------------

def _estimate_normals(points: np.ndarray, k: int = 10) -> np.ndarray:
    tree = cKDTree(points)
    k = min(k, len(points))
    _, idx = tree.query(points, k=k)
    nbrs = points[idx]                       # (N, k, 3)
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    return vecs[:, :, 0]                     # smallest-eigenvalue direction


def register_point_clouds(src: np.ndarray, dst: np.ndarray, init: Pose,
                          max_iters: int = 30, cutoff: float = 1.0,
                          tol: float = 1e-6) -> Optional[Pose]:
    """Point-to-plane ICP aligning src onto dst, seeded at ``init``.

    Returns None when the clouds share no correspondences within the
    cutoff distance (no overlap).
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) < 20 or len(dst) < 20:
        return None
    normals = _estimate_normals(dst)
    tree = cKDTree(dst)
    T = init.copy()
    for _ in range(max_iters):
        moved = T.apply(src)
        dist, idx = tree.query(moved)
        ok = dist < cutoff
        if ok.sum() < 6:
            return None
        p = src[ok]
        q = dst[idx[ok]]
        nrm = normals[idx[ok]]
        R = T.rotation
        moved_ok = moved[ok]
        r = np.einsum("ni,ni->n", nrm, moved_ok - q)
        # J = n^T [-R [p]x | R]
        Sk = np.zeros((len(p), 3, 3))
        Sk[:, 0, 1] = -p[:, 2]
        Sk[:, 0, 2] = p[:, 1]
        Sk[:, 1, 0] = p[:, 2]
        Sk[:, 1, 2] = -p[:, 0]
        Sk[:, 2, 0] = -p[:, 1]
        Sk[:, 2, 1] = p[:, 0]
        Jrot = -np.einsum("ni,ij,njk->nk", nrm, R, Sk)
        Jtrans = nrm @ R
        J = np.concatenate([Jrot, Jtrans], axis=1)
        H = J.T @ J + 1e-10 * np.eye(6)
        g = J.T @ r
        try:
            delta = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            return None
        T = T @ se3_exp(delta)
        if np.linalg.norm(delta) < tol:
            break
    return T
