"""Differentiable CPU rasterizer for Gaussian point maps.

Renders color, depth, and silhouette images by splatting each Gaussian to
a 2D footprint and alpha-compositing front to back:

    w_i = f_i * prod_{j<i} (1 - f_j)
    color = sum c_i w_i,  depth = sum z_i w_i,  silhouette = sum w_i

with f the opacity-weighted 2D Gaussian evaluated at the pixel.  The
backward pass returns analytic gradients of any scalar loss (given
per-pixel upstream gradients) with respect to every Gaussian parameter
and the 6-DoF camera pose tangent.

Both sphere (single radius) and ellipsoid (scale + orientation) shapes go
through the same EWA projection with the 3D covariance set to r^2*I for
spheres, so the two parameterizations render identically when the scales
are equal to the radius.

Determinism: per-pixel compositing order is fixed by the camera-z sort
(ties broken by insertion order), never by the tile schedule; outputs are
bit-identical for any tile size.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit
from scipy.spatial.transform import Rotation

from gslam.geometry import CameraIntrinsics, Pose

NEAR_PLANE = 0.01
# Footprint truncation: a splat contributes only inside its 3-sigma
# Mahalanobis ellipse.
TRUNCATION_Q = 9.0
# Compositing stops once transmittance drops below this.
SATURATION_EPS = 1e-4
# Per-splat alpha ceiling; keeps 1/(1-f) in the backward pass bounded.
ALPHA_MAX = 0.999
# Low-pass added to the 2D covariance diagonal (pixel^2); keeps sub-pixel
# and edge-on splats invertible, as in standard splatting rasterizers.
COV_DILATION = 0.3
# Off-axis view-ray limit for the EWA Jacobian, as a multiple of the
# frustum half-extent: bounds footprints of splats far outside the view
# (the affine approximation diverges there).
FRUSTUM_MARGIN = 1.3

ISOTROPIC = "isotropic"
ANISOTROPIC = "anisotropic"


class InvalidMapError(ValueError):
    """Map contains non-finite or out-of-range Gaussian parameters."""


@dataclass
class GaussianPoint:
    """One map primitive (convenience view; maps store struct-of-arrays)."""

    mu: np.ndarray
    color: np.ndarray
    opacity: float
    radius: Optional[float] = None
    scale: Optional[np.ndarray] = None
    orientation: Optional[np.ndarray] = None  # unit quaternion, xyzw
    owner_keyframe: int = -1

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError("opacity must be in [0, 1]")
        if self.radius is not None:
            if self.radius <= 0:
                raise ValueError("radius must be positive")
        elif self.scale is not None:
            self.scale = np.asarray(self.scale, dtype=np.float64)
            if np.any(self.scale <= 0):
                raise ValueError("scale components must be positive")
            if self.orientation is None:
                self.orientation = np.array([0.0, 0.0, 0.0, 1.0])
        else:
            raise ValueError("point needs either a radius or a scale")


class GaussianMap:
    """Gaussian point collection stored as parallel arrays.

    mode is 'isotropic' (per-point radius) or 'anisotropic' (per-point
    scale 3-vector + orientation quaternion); a map never mixes shapes.
    """

    def __init__(self, mode: str = ISOTROPIC):
        if mode not in (ISOTROPIC, ANISOTROPIC):
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self.mu = np.zeros((0, 3))
        self.color = np.zeros((0, 3))
        self.opacity = np.zeros(0)
        self.owner = np.zeros(0, dtype=np.int32)
        if mode == ISOTROPIC:
            self.radius = np.zeros(0)
            self.scale = None
            self.quat = None
        else:
            self.radius = None
            self.scale = np.zeros((0, 3))
            self.quat = np.zeros((0, 4))

    def __len__(self) -> int:
        return self.mu.shape[0]

    @staticmethod
    def from_arrays(mu, color, opacity, owner, *, radius=None, scale=None, quat=None) -> "GaussianMap":
        m = GaussianMap(ISOTROPIC if radius is not None else ANISOTROPIC)
        m.mu = np.atleast_2d(np.asarray(mu, dtype=np.float64)).copy()
        m.color = np.atleast_2d(np.asarray(color, dtype=np.float64)).copy()
        m.opacity = np.atleast_1d(np.asarray(opacity, dtype=np.float64)).copy()
        m.owner = np.atleast_1d(np.asarray(owner, dtype=np.int32)).copy()
        if radius is not None:
            m.radius = np.atleast_1d(np.asarray(radius, dtype=np.float64)).copy()
        else:
            m.scale = np.atleast_2d(np.asarray(scale, dtype=np.float64)).copy()
            m.quat = np.atleast_2d(np.asarray(quat, dtype=np.float64)).copy()
        return m

    @staticmethod
    def from_points(points) -> "GaussianMap":
        points = list(points)
        if not points:
            return GaussianMap()
        iso = points[0].radius is not None
        if any((p.radius is not None) != iso for p in points):
            raise ValueError("cannot mix sphere and ellipsoid points in one map")
        kwargs = dict(
            mu=[p.mu for p in points],
            color=[p.color for p in points],
            opacity=[p.opacity for p in points],
            owner=[p.owner_keyframe for p in points],
        )
        if iso:
            return GaussianMap.from_arrays(radius=[p.radius for p in points], **kwargs)
        return GaussianMap.from_arrays(
            scale=[p.scale for p in points], quat=[p.orientation for p in points], **kwargs
        )

    def point(self, i: int) -> GaussianPoint:
        if self.mode == ISOTROPIC:
            return GaussianPoint(self.mu[i], self.color[i], float(self.opacity[i]),
                                 radius=float(self.radius[i]), owner_keyframe=int(self.owner[i]))
        return GaussianPoint(self.mu[i], self.color[i], float(self.opacity[i]),
                             scale=self.scale[i].copy(), orientation=self.quat[i].copy(),
                             owner_keyframe=int(self.owner[i]))

    def append_arrays(self, mu, color, opacity, owner, *, radius=None, scale=None, quat=None):
        mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
        n = mu.shape[0]
        self.mu = np.concatenate([self.mu, mu])
        self.color = np.concatenate([self.color, np.atleast_2d(np.asarray(color, dtype=np.float64))])
        self.opacity = np.concatenate([self.opacity, np.broadcast_to(np.asarray(opacity, dtype=np.float64), (n,))])
        self.owner = np.concatenate([self.owner, np.broadcast_to(np.asarray(owner, dtype=np.int32), (n,))])
        if self.mode == ISOTROPIC:
            if radius is None:
                raise ValueError("isotropic map needs radii")
            self.radius = np.concatenate([self.radius, np.broadcast_to(np.asarray(radius, dtype=np.float64), (n,))])
        else:
            if scale is None:
                raise ValueError("anisotropic map needs scales")
            self.scale = np.concatenate([self.scale, np.atleast_2d(np.asarray(scale, dtype=np.float64))])
            q = np.atleast_2d(np.asarray(quat, dtype=np.float64)) if quat is not None \
                else np.tile([0.0, 0.0, 0.0, 1.0], (n, 1))
            self.quat = np.concatenate([self.quat, q])

    def select(self, keep) -> "GaussianMap":
        """New map containing the given indices / boolean mask."""
        m = GaussianMap(self.mode)
        m.mu = self.mu[keep].copy()
        m.color = self.color[keep].copy()
        m.opacity = self.opacity[keep].copy()
        m.owner = self.owner[keep].copy()
        if self.mode == ISOTROPIC:
            m.radius = self.radius[keep].copy()
        else:
            m.scale = self.scale[keep].copy()
            m.quat = self.quat[keep].copy()
        return m

    def copy(self) -> "GaussianMap":
        return self.select(slice(None))

    def to_anisotropic(self) -> "GaussianMap":
        """Spheres -> ellipsoids with scale (r, r, r), identity orientation."""
        if self.mode != ISOTROPIC:
            raise ValueError("map is already anisotropic")
        m = GaussianMap(ANISOTROPIC)
        m.mu = self.mu.copy()
        m.color = self.color.copy()
        m.opacity = self.opacity.copy()
        m.owner = self.owner.copy()
        m.scale = np.repeat(self.radius[:, None], 3, axis=1)
        m.quat = np.tile([0.0, 0.0, 0.0, 1.0], (len(self), 1))
        return m

    def validate(self):
        arrays = [self.mu, self.color, self.opacity]
        arrays += [self.radius] if self.mode == ISOTROPIC else [self.scale, self.quat]
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise InvalidMapError("map contains non-finite parameters")
        if np.any(self.opacity < 0) or np.any(self.opacity > 1):
            raise InvalidMapError("opacity outside [0, 1]")
        if self.mode == ISOTROPIC:
            if np.any(self.radius <= 0):
                raise InvalidMapError("non-positive radius")
        elif np.any(self.scale <= 0):
            raise InvalidMapError("non-positive scale component")


@dataclass
class RenderOutput:
    color: np.ndarray      # (H, W, 3) in [0, 1]
    depth: np.ndarray      # (H, W) meters, 0 where nothing rendered
    silhouette: np.ndarray  # (H, W) accumulated alpha in [0, 1]


@dataclass
class MapGradients:
    """Gradients of a scalar loss w.r.t. map parameters and camera pose."""

    d_mu: np.ndarray
    d_color: np.ndarray
    d_opacity: np.ndarray
    d_pose: np.ndarray  # 6-tangent (rotation, translation)
    d_radius: Optional[np.ndarray] = None
    d_scale: Optional[np.ndarray] = None
    d_quat: Optional[np.ndarray] = None


def gaussian_weight(x, center, opacity, radius=None, cov=None) -> float:
    """Opacity-weighted Gaussian density, in [0, opacity].

    Works in 2D or 3D; pass ``radius`` for a sphere or ``cov`` for a full
    covariance.
    """
    d = np.asarray(x, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    if radius is not None:
        q = float(d @ d) / (radius * radius)
    elif cov is not None:
        q = float(d @ np.linalg.solve(np.asarray(cov, dtype=np.float64), d))
    else:
        raise ValueError("need radius or cov")
    return float(opacity * np.exp(-0.5 * q))


# ---------------------------------------------------------------------------
# compositing scan kernels (sequential per pixel, grouped pair arrays)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _scan_forward(order, pix, splat, f, zc, rgb, out_rgb, out_depth, out_sil, T_before):
    # order visits pairs grouped by pixel, depth order within the group;
    # zc/rgb are per-splat arrays indexed through splat
    n = order.shape[0]
    i = 0
    while i < n:
        p = pix[order[i]]
        T = 1.0
        while i < n and pix[order[i]] == p:
            k = order[i]
            T_before[k] = T
            if T >= 1e-4:
                s = splat[k]
                w = f[k] * T
                out_rgb[p, 0] += w * rgb[s, 0]
                out_rgb[p, 1] += w * rgb[s, 1]
                out_rgb[p, 2] += w * rgb[s, 2]
                out_depth[p] += w * zc[s]
                out_sil[p] += w
                T *= 1.0 - f[k]
            i += 1


@njit(cache=True)
def _gen_pairs(hit, x0, x1, y0, y1, u, v, ia, ib, ic, opacity,
               tx0, ty0, tx1, ty1, img_w,
               out_splat, out_d0, out_d1, out_g, out_f_raw, out_f,
               out_pix, out_img):
    # evaluate each overlapping splat over its clipped bbox; keep pixels
    # inside the 3-sigma Mahalanobis ellipse
    n_out = 0
    tile_w = tx1 - tx0 + 1
    for t in range(hit.shape[0]):
        s = hit[t]
        bx0 = max(x0[s], tx0)
        bx1 = min(x1[s], tx1)
        by0 = max(y0[s], ty0)
        by1 = min(y1[s], ty1)
        for py in range(by0, by1 + 1):
            d1 = py - v[s]
            for px in range(bx0, bx1 + 1):
                d0 = px - u[s]
                q = ia[s] * d0 * d0 + 2.0 * ib[s] * d0 * d1 + ic[s] * d1 * d1
                if q <= TRUNCATION_Q:
                    g = np.exp(-0.5 * q)
                    fr = opacity[s] * g
                    out_splat[n_out] = s
                    out_d0[n_out] = d0
                    out_d1[n_out] = d1
                    out_g[n_out] = g
                    out_f_raw[n_out] = fr
                    out_f[n_out] = fr if fr < ALPHA_MAX else ALPHA_MAX
                    out_pix[n_out] = (py - ty0) * tile_w + (px - tx0)
                    out_img[n_out] = py * img_w + px
                    n_out += 1
    return n_out


@njit(cache=True)
def _scan_backward(order, pix, splat, f, f_raw, g, T_before, d0, d1, img_idx,
                   gc, gd, gs, color, zc, ia, ib, ic,
                   acc_u, acc_v, acc_c00, acc_c01, acc_c11,
                   acc_o, acc_zdir, acc_rgb):
    # per pixel segment, back to front:
    #   grad_f[i] = T_i * A'_i - (sum_{k>i} A'_k w_k) / (1 - f_i)
    # then chain grad_f into the per-splat 2D accumulators in place
    n = order.shape[0]
    start = 0
    while start < n:
        p = pix[order[start]]
        end = start
        while end < n and pix[order[end]] == p:
            end += 1
        S = 0.0
        for j in range(end - 1, start - 1, -1):
            k = order[j]
            T = T_before[k]
            if T < 1e-4:
                continue
            s = splat[k]
            ii = img_idx[k]
            a = (gc[ii, 0] * color[s, 0] + gc[ii, 1] * color[s, 1]
                 + gc[ii, 2] * color[s, 2] + gd[ii] * zc[s] + gs[ii])
            w = f[k] * T
            gf = T * a - S / (1.0 - f[k])
            S += a * w
            acc_rgb[s, 0] += gc[ii, 0] * w
            acc_rgb[s, 1] += gc[ii, 1] * w
            acc_rgb[s, 2] += gc[ii, 2] * w
            acc_zdir[s] += gd[ii] * w
            if f_raw[k] < ALPHA_MAX:
                # f = o*g: d f/d o = g, d f/d q = -f/2 (zero where clamped)
                acc_o[s] += gf * g[k]
                gq = -0.5 * gf * f_raw[k]
                m0 = ia[s] * d0[k] + ib[s] * d1[k]
                m1 = ib[s] * d0[k] + ic[s] * d1[k]
                acc_u[s] -= gq * 2.0 * m0
                acc_v[s] -= gq * 2.0 * m1
                acc_c00[s] -= gq * m0 * m0
                acc_c01[s] -= gq * m0 * m1
                acc_c11[s] -= gq * m1 * m1
        start = end


# ---------------------------------------------------------------------------
# splat preparation
# ---------------------------------------------------------------------------

class _SplatScene:
    """Per-render splat data, sorted front to back."""

    __slots__ = ("n_total", "orig_idx", "xc", "u", "v", "J", "M", "sigma3d",
                 "cov_a", "cov_b", "cov_c", "inv_a", "inv_b", "inv_c",
                 "x0", "x1", "y0", "y1", "opacity", "color", "R", "Rq",
                 "tx", "ty", "free_x", "free_y")

    def __init__(self):
        self.n_total = 0


def _prepare_splats(gmap: GaussianMap, T_cw: Pose, K: CameraIntrinsics) -> _SplatScene:
    gmap.validate()
    s = _SplatScene()
    s.n_total = len(gmap)
    R = T_cw.rotation
    s.R = R
    xc = gmap.mu @ R.T + T_cw.t
    z = xc[:, 2]
    in_front = z > NEAR_PLANE

    # front-to-back order; stable sort keeps insertion order on z ties
    idx = np.nonzero(in_front)[0]
    order = np.argsort(z[idx], kind="stable")
    idx = idx[order]

    xc = xc[idx]
    x, y, z = xc[:, 0], xc[:, 1], xc[:, 2]
    n = idx.shape[0]

    u = K.fx * x / z + K.cx
    v = K.fy * y / z + K.cy

    # EWA Jacobian with the off-axis ray clamped to the widened frustum
    lim_x = FRUSTUM_MARGIN * 0.5 * K.width / K.fx
    lim_y = FRUSTUM_MARGIN * 0.5 * K.height / K.fy
    tx = np.clip(x / z, -lim_x, lim_x)
    ty = np.clip(y / z, -lim_y, lim_y)
    free_x = np.abs(x / z) < lim_x
    free_y = np.abs(y / z) < lim_y

    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = K.fx / z
    J[:, 0, 2] = -K.fx * tx / z
    J[:, 1, 1] = K.fy / z
    J[:, 1, 2] = -K.fy * ty / z
    M = J @ R

    if gmap.mode == ISOTROPIC:
        r2 = gmap.radius[idx] ** 2
        sigma3d = r2[:, None, None] * np.eye(3)
        s.Rq = None
    else:
        Rq = Rotation.from_quat(gmap.quat[idx]).as_matrix() if n else np.zeros((0, 3, 3))
        s2 = gmap.scale[idx] ** 2
        sigma3d = np.einsum("nij,nj,nkj->nik", Rq, s2, Rq)
        s.Rq = Rq

    cov = np.einsum("nij,njk,nlk->nil", M, sigma3d, M)
    a = cov[:, 0, 0] + COV_DILATION
    b = cov[:, 0, 1]
    c = cov[:, 1, 1] + COV_DILATION
    det = a * c - b * b
    s.inv_a = c / det
    s.inv_b = -b / det
    s.inv_c = a / det

    rx = 3.0 * np.sqrt(a)
    ry = 3.0 * np.sqrt(c)
    s.x0 = np.maximum(np.ceil(u - rx), 0).astype(np.int64)
    s.x1 = np.minimum(np.floor(u + rx), K.width - 1).astype(np.int64)
    s.y0 = np.maximum(np.ceil(v - ry), 0).astype(np.int64)
    s.y1 = np.minimum(np.floor(v + ry), K.height - 1).astype(np.int64)

    on_screen = (s.x0 <= s.x1) & (s.y0 <= s.y1)
    keep = np.nonzero(on_screen)[0]
    for name in ("x0", "x1", "y0", "y1", "inv_a", "inv_b", "inv_c"):
        setattr(s, name, getattr(s, name)[keep])
    s.orig_idx = idx[keep]
    s.xc = xc[keep]
    s.u, s.v = u[keep], v[keep]
    s.J, s.M = J[keep], M[keep]
    s.sigma3d = sigma3d[keep]
    s.cov_a, s.cov_b, s.cov_c = a[keep], b[keep], c[keep]
    s.tx, s.ty = tx[keep], ty[keep]
    s.free_x, s.free_y = free_x[keep], free_y[keep]
    if s.Rq is not None:
        s.Rq = s.Rq[keep]
    s.opacity = gmap.opacity[s.orig_idx]
    s.color = gmap.color[s.orig_idx]
    return s


def _tile_pairs(s: _SplatScene, tx0: int, ty0: int, tx1: int, ty1: int, img_w: int):
    """Splat/pixel pairs for one tile, sorted by pixel then depth order.

    Returns (splat, d0, d1, g, f_raw, f, pix, img_idx) or None when
    nothing overlaps the tile.
    """
    hit = np.nonzero((s.x0 <= tx1) & (s.x1 >= tx0) & (s.y0 <= ty1) & (s.y1 >= ty0))[0]
    if hit.size == 0:
        return None
    cap = int(((np.minimum(s.x1[hit], tx1) - np.maximum(s.x0[hit], tx0) + 1)
               * (np.minimum(s.y1[hit], ty1) - np.maximum(s.y0[hit], ty0) + 1)).sum())
    if cap <= 0:
        return None
    splat = np.empty(cap, dtype=np.int64)
    d0 = np.empty(cap)
    d1 = np.empty(cap)
    g = np.empty(cap)
    f_raw = np.empty(cap)
    f = np.empty(cap)
    pix = np.empty(cap, dtype=np.int64)
    img_idx = np.empty(cap, dtype=np.int64)
    n = _gen_pairs(hit, s.x0, s.x1, s.y0, s.y1, s.u, s.v,
                   s.inv_a, s.inv_b, s.inv_c, s.opacity,
                   tx0, ty0, tx1, ty1, img_w,
                   splat, d0, d1, g, f_raw, f, pix, img_idx)
    if n == 0:
        return None
    order = np.argsort(pix[:n], kind="stable")
    return (order, splat[:n], d0[:n], d1[:n], g[:n], f_raw[:n], f[:n],
            pix[:n], img_idx[:n])


def _tile_ranges(K: CameraIntrinsics, tile_size: int):
    for ty0 in range(0, K.height, tile_size):
        ty1 = min(ty0 + tile_size, K.height) - 1
        for tx0 in range(0, K.width, tile_size):
            tx1 = min(tx0 + tile_size, K.width) - 1
            yield tx0, ty0, tx1, ty1


def render(gmap: GaussianMap, T_cw: Pose, K: CameraIntrinsics, tile_size: int = 64) -> RenderOutput:
    """Rasterize the map from pose T_cw (world->camera)."""
    H, W = K.height, K.width
    color = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    sil = np.zeros((H, W))
    if len(gmap) == 0:
        return RenderOutput(color, depth, sil)

    s = _prepare_splats(gmap, T_cw, K)
    zc = np.ascontiguousarray(s.xc[:, 2])
    colors = np.ascontiguousarray(s.color)
    for tx0, ty0, tx1, ty1 in _tile_ranges(K, tile_size):
        pairs = _tile_pairs(s, tx0, ty0, tx1, ty1, K.width)
        if pairs is None:
            continue
        order, splat, d0, d1, g, f_raw, f, pix, img_idx = pairs
        th, tw = ty1 - ty0 + 1, tx1 - tx0 + 1
        t_rgb = np.zeros((th * tw, 3))
        t_depth = np.zeros(th * tw)
        t_sil = np.zeros(th * tw)
        T_before = np.zeros(f.shape[0])
        _scan_forward(order, pix, splat, f, zc, colors, t_rgb, t_depth, t_sil, T_before)
        color[ty0:ty1 + 1, tx0:tx1 + 1] = t_rgb.reshape(th, tw, 3)
        depth[ty0:ty1 + 1, tx0:tx1 + 1] = t_depth.reshape(th, tw)
        sil[ty0:ty1 + 1, tx0:tx1 + 1] = t_sil.reshape(th, tw)
    return RenderOutput(color, depth, sil)


def render_backward(gmap: GaussianMap, T_cw: Pose, K: CameraIntrinsics,
                    grad_color: Optional[np.ndarray] = None,
                    grad_depth: Optional[np.ndarray] = None,
                    grad_silhouette: Optional[np.ndarray] = None,
                    tile_size: int = 64) -> MapGradients:
    """Analytic gradients for the scene rendered by the matching ``render``.

    Upstream arrays hold dLoss/d(output) per pixel; missing ones are zero.
    """
    H, W = K.height, K.width
    gc = np.zeros((H, W, 3)) if grad_color is None else np.asarray(grad_color, dtype=np.float64)
    gd = np.zeros((H, W)) if grad_depth is None else np.asarray(grad_depth, dtype=np.float64)
    gs = np.zeros((H, W)) if grad_silhouette is None else np.asarray(grad_silhouette, dtype=np.float64)
    if gc.shape != (H, W, 3) or gd.shape != (H, W) or gs.shape != (H, W):
        raise ValueError("upstream gradient shapes do not match the camera image size")

    n = len(gmap)
    out = MapGradients(
        d_mu=np.zeros((n, 3)), d_color=np.zeros((n, 3)), d_opacity=np.zeros(n),
        d_pose=np.zeros(6),
    )
    if gmap.mode == ISOTROPIC:
        out.d_radius = np.zeros(n)
    else:
        out.d_scale = np.zeros((n, 3))
        out.d_quat = np.zeros((n, 4))
    if n == 0:
        return out

    s = _prepare_splats(gmap, T_cw, K)
    ns = s.orig_idx.shape[0]
    if ns == 0:
        return out

    # per-splat accumulators over all tiles (indexed by sorted-splat id)
    acc_u = np.zeros(ns)
    acc_v = np.zeros(ns)
    acc_c00 = np.zeros(ns)   # grad w.r.t. 2D covariance entries
    acc_c01 = np.zeros(ns)
    acc_c11 = np.zeros(ns)
    acc_o = np.zeros(ns)
    acc_zdir = np.zeros(ns)
    acc_rgb = np.zeros((ns, 3))

    zc = np.ascontiguousarray(s.xc[:, 2])
    colors = np.ascontiguousarray(s.color)
    gc_flat = np.ascontiguousarray(gc.reshape(-1, 3))
    gd_flat = np.ascontiguousarray(gd.reshape(-1))
    gs_flat = np.ascontiguousarray(gs.reshape(-1))

    for tx0, ty0, tx1, ty1 in _tile_ranges(K, tile_size):
        pairs = _tile_pairs(s, tx0, ty0, tx1, ty1, K.width)
        if pairs is None:
            continue
        order, splat, d0, d1, g, f_raw, f, pix, img_idx = pairs
        T_before = np.zeros(f.shape[0])
        # first pass recovers per-pair transmittance (outputs discarded)
        _scan_forward(order, pix, splat, f, zc, colors,
                      np.zeros(((ty1 - ty0 + 1) * (tx1 - tx0 + 1), 3)),
                      np.zeros((ty1 - ty0 + 1) * (tx1 - tx0 + 1)),
                      np.zeros((ty1 - ty0 + 1) * (tx1 - tx0 + 1)), T_before)
        _scan_backward(order, pix, splat, f, f_raw, g, T_before, d0, d1, img_idx,
                       gc_flat, gd_flat, gs_flat, colors, zc,
                       s.inv_a, s.inv_b, s.inv_c,
                       acc_u, acc_v, acc_c00, acc_c01, acc_c11,
                       acc_o, acc_zdir, acc_rgb)

    # ---- chain 2D accumulators back to 3D parameters and pose ----
    x, y, z = s.xc[:, 0], s.xc[:, 1], s.xc[:, 2]
    fx, fy = K.fx, K.fy

    G2 = np.empty((ns, 2, 2))
    G2[:, 0, 0] = acc_c00
    G2[:, 0, 1] = acc_c01
    G2[:, 1, 0] = acc_c01
    G2[:, 1, 1] = acc_c11

    grad_sigma3d = np.einsum("nji,njk,nkl->nil", s.M, G2, s.M)
    grad_M = 2.0 * np.einsum("nij,njk,nkl->nil", G2, s.M, s.sigma3d)
    grad_J = grad_M @ s.R.T           # (ns, 2, 3)
    grad_W = np.einsum("nji,njk->nik", s.J, grad_M)  # J^T grad_M, (ns, 3, 3)

    gJ00 = grad_J[:, 0, 0]
    gJ02 = grad_J[:, 0, 2]
    gJ11 = grad_J[:, 1, 1]
    gJ12 = grad_J[:, 1, 2]

    # J02 = -fx * tx / z with tx clamped: the (x, z) paths through tx are
    # cut where the clamp binds, leaving only the explicit 1/z dependence
    z2 = z * z
    grad_xc = np.empty((ns, 3))
    grad_xc[:, 0] = acc_u * fx / z - gJ02 * fx / z2 * s.free_x
    grad_xc[:, 1] = acc_v * fy / z - gJ12 * fy / z2 * s.free_y
    grad_xc[:, 2] = (
        -acc_u * fx * x / z2 - acc_v * fy * y / z2
        - gJ00 * fx / z2 - gJ11 * fy / z2
        + gJ02 * fx * (s.tx + np.where(s.free_x, x / z, 0.0)) / z2
        + gJ12 * fy * (s.ty + np.where(s.free_y, y / z, 0.0)) / z2
        + acc_zdir
    )

    grad_mu = grad_xc @ s.R           # R^T grad_xc, row-wise

    # pose tangent (right perturbation): translation part is sum of R^T g,
    # rotation part sums mu x (R^T g) plus the camera-rotation path through
    # the EWA warp (antisymmetric part of R^T grad_W).
    mu_s = gmap.mu[s.orig_idx]
    d_rho = grad_mu.sum(axis=0)
    d_omega = np.cross(mu_s, grad_mu).sum(axis=0)
    B = np.einsum("ji,njk->nik", s.R, grad_W)
    d_omega += np.array([
        (B[:, 2, 1] - B[:, 1, 2]).sum(),
        (B[:, 0, 2] - B[:, 2, 0]).sum(),
        (B[:, 1, 0] - B[:, 0, 1]).sum(),
    ])
    out.d_pose = np.concatenate([d_omega, d_rho])

    # scatter per-splat grads back to original map order
    out.d_mu[s.orig_idx] = grad_mu
    out.d_opacity[s.orig_idx] = acc_o
    for ch in range(3):
        out.d_color[s.orig_idx, ch] = acc_rgb[:, ch]

    if gmap.mode == ISOTROPIC:
        r = gmap.radius[s.orig_idx]
        out.d_radius[s.orig_idx] = 2.0 * r * np.trace(grad_sigma3d, axis1=1, axis2=2)
    else:
        sc = gmap.scale[s.orig_idx]
        # Sigma3D = Rq diag(s^2) Rq^T
        RtHR = np.einsum("nji,njk,nkl->nil", s.Rq, grad_sigma3d, s.Rq)
        out.d_scale[s.orig_idx] = 2.0 * sc * np.stack(
            [RtHR[:, 0, 0], RtHR[:, 1, 1], RtHR[:, 2, 2]], axis=1)
        s2 = sc ** 2
        grad_Rq = 2.0 * np.einsum("nij,njk,nk->nik", grad_sigma3d, s.Rq, s2)
        out.d_quat[s.orig_idx] = _quat_grad_from_rot_grad(gmap.quat[s.orig_idx], grad_Rq)
    return out


def _quat_grad_from_rot_grad(quat: np.ndarray, grad_R: np.ndarray) -> np.ndarray:
    """Chain dL/dR -> dL/dq for unit quaternions (xyzw), including the
    normalization Jacobian so raw-component perturbations check out."""
    qx, qy, qz, qw = quat[:, 0], quat[:, 1], quat[:, 2], quat[:, 3]
    n = quat.shape[0]
    dR = np.zeros((n, 4, 3, 3))
    # dR/dqx
    dR[:, 0, 0, 1] = 2 * qy
    dR[:, 0, 0, 2] = 2 * qz
    dR[:, 0, 1, 0] = 2 * qy
    dR[:, 0, 1, 1] = -4 * qx
    dR[:, 0, 1, 2] = -2 * qw
    dR[:, 0, 2, 0] = 2 * qz
    dR[:, 0, 2, 1] = 2 * qw
    dR[:, 0, 2, 2] = -4 * qx
    # dR/dqy
    dR[:, 1, 0, 0] = -4 * qy
    dR[:, 1, 0, 1] = 2 * qx
    dR[:, 1, 0, 2] = 2 * qw
    dR[:, 1, 1, 0] = 2 * qx
    dR[:, 1, 1, 2] = 2 * qz
    dR[:, 1, 2, 0] = -2 * qw
    dR[:, 1, 2, 1] = 2 * qz
    dR[:, 1, 2, 2] = -4 * qy
    # dR/dqz
    dR[:, 2, 0, 0] = -4 * qz
    dR[:, 2, 0, 1] = -2 * qw
    dR[:, 2, 0, 2] = 2 * qx
    dR[:, 2, 1, 0] = 2 * qw
    dR[:, 2, 1, 1] = -4 * qz
    dR[:, 2, 1, 2] = 2 * qy
    dR[:, 2, 2, 0] = 2 * qx
    dR[:, 2, 2, 1] = 2 * qy
    # dR/dqw
    dR[:, 3, 0, 1] = -2 * qz
    dR[:, 3, 0, 2] = 2 * qy
    dR[:, 3, 1, 0] = 2 * qz
    dR[:, 3, 1, 2] = -2 * qx
    dR[:, 3, 2, 0] = -2 * qy
    dR[:, 3, 2, 1] = 2 * qx

    g = np.einsum("nkij,nij->nk", dR, grad_R)
    # normalization: project out the radial component
    return g - (g * quat).sum(axis=1, keepdims=True) * quat
