"""Pinhole projection, depth-based inverse warping, and the numerical
verification that warping admits a global scale freedom but no shift freedom.

Convention: pixel (u, v) sits at integer coordinates (pixel centers);
u indexes columns, v indexes rows. Depths are camera-frame z.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from . import tensor as T
from .tensor import Tensor, as_tensor

MIN_DEPTH = 1e-6  # clamp before the projective division


class DegenerateSceneError(ValueError):
    """Raised when a scene/pose pair cannot distinguish shifted depth
    (single fronto-parallel plane under pure translation): inconclusive."""


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def ray_directions(self) -> np.ndarray:
        """K^-1 (u, v, 1) per pixel, shape (H, W, 3), z component 1."""
        u = np.arange(self.width)
        v = np.arange(self.height)
        uu, vv = np.meshgrid(u, v)
        return np.stack([(uu - self.cx) / self.fx,
                         (vv - self.cy) / self.fy,
                         np.ones_like(uu, dtype=np.float64)], axis=-1)


@dataclass(frozen=True)
class RigidPose:
    R: np.ndarray
    T: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        t = np.asarray(self.T, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "T", t)
        if R.shape != (3, 3):
            raise ValueError("R must be 3x3")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-10):
            raise ValueError("R must be orthonormal")
        if not np.isclose(np.linalg.det(R), 1.0, atol=1e-10):
            raise ValueError("R must be a proper rotation (det 1)")

    @staticmethod
    def identity() -> "RigidPose":
        return RigidPose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_axis_angle(axis_angle, translation) -> "RigidPose":
        aa = np.asarray(axis_angle, dtype=np.float64)
        theta = np.linalg.norm(aa)
        if theta < 1e-12:
            R = np.eye(3)
        else:
            k = aa / theta
            K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
            R = np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * (K @ K)
        return RigidPose(R, np.asarray(translation, dtype=np.float64))

    def inverse(self) -> "RigidPose":
        return RigidPose(self.R.T, -self.R.T @ self.T)

    def compose(self, other: "RigidPose") -> "RigidPose":
        """self after other: x -> self(other(x))."""
        return RigidPose(self.R @ other.R, self.R @ other.T + self.T)

    def rotation_angle(self) -> float:
        c = (np.trace(self.R) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))

    def scaled(self, s: float) -> "RigidPose":
        return RigidPose(self.R, s * self.T)


def relative_pose(world_from_tgt: RigidPose, world_from_src: RigidPose) -> RigidPose:
    """Pose mapping target-camera points into the source camera frame."""
    return world_from_src.inverse().compose(world_from_tgt)


@dataclass(frozen=True)
class DepthMap:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if v.ndim != 2:
            raise ValueError("depth map must be H x W")
        if not np.isfinite(v).all() or (v <= 0).any():
            raise ValueError("depth values must be finite and positive")

    @property
    def shape(self):
        return self.values.shape


def _depth_tensor(depth) -> Tensor:
    if isinstance(depth, DepthMap):
        return as_tensor(depth.values)
    return as_tensor(depth)


def backproject(K: CameraModel, depth) -> Tensor:
    """Lift every pixel to 3-D: D(u, v) * K^-1 (u, v, 1)."""
    d = _depth_tensor(depth)
    if d.shape != (K.height, K.width):
        raise ValueError(f"depth shape {d.shape} does not match camera "
                         f"{K.height}x{K.width}")
    return d.reshape(K.height, K.width, 1) * K.ray_directions()


def transform_points(points, R, t) -> Tensor:
    """Apply [R|t] to an (H, W, 3) point field. R and t may be on the tape."""
    p = as_tensor(points)
    h, w, _ = p.shape
    flat = p.reshape(h * w, 3)
    Rt = T.transpose(as_tensor(R))
    out = T.matmul(flat, Rt) + as_tensor(t).reshape(1, 3)
    return out.reshape(h, w, 3)


def project(K: CameraModel, points):
    """Project an (H, W, 3) point field to pixel coordinates.

    Returns (coords (H, W, 2), depths (H, W), valid) where valid marks
    points strictly in front of the camera; points at z <= 0 are flagged,
    never silently projected (division uses a clamped z).
    """
    p = as_tensor(points)
    z = p[..., 2]
    valid = z.data > 0.0
    zs = T.maximum(z, MIN_DEPTH)
    u = K.fx * (p[..., 0] / zs) + K.cx
    v = K.fy * (p[..., 1] / zs) + K.cy
    coords = T.stack([u, v], axis=-1)
    return coords, z, valid


def warp_coords(depth, pose: RigidPose, K: CameraModel):
    """Pixel coordinates in the source view for every target pixel."""
    pts = backproject(K, depth)
    pts = transform_points(pts, pose.R, pose.T)
    return project(K, pts)


def warp_frame(image, depth, pose: RigidPose, K: CameraModel,
               R=None, t=None):
    """Inverse-warp a source image into the target view.

    backproject -> rigid transform -> project -> bilinear sample. The mask
    is False where the projection is invalid (z <= 0) or lands out of frame.
    R/t override pose when the rigid transform itself must stay on the tape.
    """
    img = as_tensor(image)
    pts = backproject(K, depth)
    if R is None:
        R, t = pose.R, pose.T
    pts = transform_points(pts, R, t)
    coords, _, valid = project(K, pts)
    warped, inframe = T.bilinear_sample(img, coords)
    return warped, valid & inframe


def scale_ambiguity_residual(depth, pose: RigidPose, K: CameraModel,
                             s_c: float) -> float:
    """Max pixel displacement between warping with (D, T) and (s_c D, s_c T).

    Zero (to roundoff) for any s_c > 0: joint scaling of depth and
    translation is an exact symmetry of reprojection.
    """
    if s_c <= 0:
        raise ValueError("s_c must be positive")
    d = _depth_tensor(depth).data
    c1, _, v1 = warp_coords(d, pose, K)
    c2, _, v2 = warp_coords(s_c * d, pose.scaled(s_c), K)
    both = v1 & v2
    if not both.any():
        return 0.0
    diff = np.abs(c1.data - c2.data)[both]
    return float(diff.max())


def _is_constant_depth(d: np.ndarray, tol: float = 1e-9) -> bool:
    return float(d.max() - d.min()) <= tol * float(d.mean())


def shift_ambiguity_residual(depth, pose: RigidPose, K: CameraModel,
                             s_h: float) -> float:
    """Best-case reprojection inconsistency (px, RMS) of shifted depth.

    Tests whether the correspondences induced by (D, [R|T]) can also be
    produced by the shifted depth D + s_h under any affine freedom: a free
    scale on the shifted depth and a free replacement of the translation.
    The fit minimizes squared pixel error; the returned RMS of the optimal
    fit lower-bounds the inconsistency of every affine re-fit, so a strictly
    positive value certifies that the shift admits no geometric explanation.

    Raises DegenerateSceneError for a constant-depth scene under pure
    translation (a shifted fronto-parallel plane is still a plane).
    """
    d = _depth_tensor(depth).data
    if s_h == 0.0:
        return scale_ambiguity_residual(d, pose, K, 1.0)
    if _is_constant_depth(d):
        # a shifted fronto-parallel plane is still a plane, and plane
        # correspondences are homographies a plane at depth s_h can mimic
        raise DegenerateSceneError(
            "inconclusive: constant-depth scene cannot witness a shift")

    dirs = K.ray_directions()
    pts = dirs * d[..., None]
    tgt = (pts.reshape(-1, 3) @ pose.R.T) + pose.T
    vis = tgt[:, 2] > MIN_DEPTH
    tgt = tgt[vis]
    uv_true = np.stack([K.fx * tgt[:, 0] / tgt[:, 2] + K.cx,
                        K.fy * tgt[:, 1] / tgt[:, 2] + K.cy], axis=-1)

    # Reduced consistency equation: the residual correspondence field must be
    # explainable as a plane at depth s_h seen through [R|c] for some vector c
    # (the affine magnitude on the second-view depth is absorbed by the
    # projection, which only sees ray directions).
    b_term = dirs.reshape(-1, 3)[vis] @ pose.R.T

    def residuals(c):
        q = s_h * b_term + c
        z = np.maximum(q[:, 2], MIN_DEPTH)
        uv = np.stack([K.fx * q[:, 0] / z + K.cx,
                       K.fy * q[:, 1] / z + K.cy], axis=-1)
        return (uv - uv_true).reshape(-1)

    centroid = (pts.reshape(-1, 3)[vis] @ pose.R.T).mean(axis=0) + pose.T
    best = np.inf
    for c0 in (pose.T, centroid, centroid * 0.1, centroid * 10.0):
        sol = scipy.optimize.least_squares(residuals, np.asarray(c0, dtype=float),
                                           method="lm")
        r = sol.fun.reshape(-1, 2)
        best = min(best, float(np.sqrt(np.mean(np.sum(r * r, axis=1)))))
    return best
