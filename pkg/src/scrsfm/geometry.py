"""Pinhole camera and rigid-transform helpers.

Poses are stored camera-to-scene: ``x_scene = R @ x_cam + t``.  Projection
inverts the pose internally.  Cameras follow the usual computer-vision axes
(x right, y down, z forward).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import BehindCamera, DegenerateRotation, NonPositiveDepth

EPS_DEPTH = 1e-6
_GS_MIN_ANGLE = 1e-8


@dataclass(frozen=True)
class Intrinsics:
    """Single focal length, principal point at the image centre."""

    f: float
    width: int
    height: int

    def __post_init__(self):
        if not self.f > 0:
            raise ValueError(f"focal length must be positive, got {self.f}")

    @property
    def cx(self) -> float:
        return self.width / 2.0

    @property
    def cy(self) -> float:
        return self.height / 2.0

    def matrix(self) -> np.ndarray:
        return np.array([[self.f, 0.0, self.cx], [0.0, self.f, self.cy], [0.0, 0.0, 1.0]])

    def with_focal(self, f: float) -> "Intrinsics":
        return Intrinsics(float(f), self.width, self.height)


@dataclass
class RigidPose:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "RigidPose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3].copy(), m[:3, 3].copy())

    def matrix34(self) -> np.ndarray:
        return np.hstack([self.R, self.t[:, None]])

    def matrix44(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x @ self.R.T + self.t

    @property
    def center(self) -> np.ndarray:
        """Camera centre in scene coordinates."""
        return self.t

    def copy(self) -> "RigidPose":
        return RigidPose(self.R.copy(), self.t.copy())


def is_rotation(R, tol=1e-9) -> bool:
    R = np.asarray(R)
    return bool(np.abs(R.T @ R - np.eye(3)).max() <= tol and abs(np.linalg.det(R) - 1.0) <= tol)


def to_camera(R, t, y):
    """Scene points -> camera frame for a camera-to-scene pose (broadcasts)."""
    return np.einsum("...ji,...j->...i", R, np.asarray(y) - t)


def project_points(f, cx, cy, R, t, y):
    """Vectorised projection.

    Returns ``(uv, z)`` where ``z`` is the camera-frame depth.  Entries with
    ``z <= EPS_DEPTH`` get ``nan`` pixels; callers decide how to treat them.
    """
    xc = to_camera(R, t, y)
    z = xc[..., 2]
    valid = z > EPS_DEPTH
    zs = np.where(valid, z, 1.0)
    uv = np.stack([f * xc[..., 0] / zs + cx, f * xc[..., 1] / zs + cy], axis=-1)
    uv[~valid] = np.nan
    return uv, z


def project(K: Intrinsics, T: RigidPose, y) -> np.ndarray:
    xc = T.R.T @ (np.asarray(y, dtype=np.float64) - T.t)
    if not xc[2] > EPS_DEPTH:
        raise BehindCamera(f"camera-frame depth {xc[2]:.3g} <= {EPS_DEPTH}")
    return np.array([K.f * xc[0] / xc[2] + K.cx, K.f * xc[1] / xc[2] + K.cy])


def backproject(K: Intrinsics, p, d) -> np.ndarray:
    """Pixel and depth -> camera-frame point."""
    if not d > 0:
        raise NonPositiveDepth(f"depth must be positive, got {d}")
    u, v = p
    return np.array([(u - K.cx) * d / K.f, (v - K.cy) * d / K.f, float(d)])


def backproject_points(f, cx, cy, pixels, depth) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise NonPositiveDepth("all depths must be positive")
    return np.stack(
        [(pixels[..., 0] - cx) * depth / f, (pixels[..., 1] - cy) * depth / f, depth], axis=-1
    )


def gram_schmidt(M):
    """Orthonormalise the first two columns of ``M`` (..., 3, 3); third from the cross product."""
    M = np.asarray(M, dtype=np.float64)
    c1, c2 = M[..., :, 0], M[..., :, 1]
    n1 = np.linalg.norm(c1, axis=-1)
    n2 = np.linalg.norm(c2, axis=-1)
    cross = np.linalg.norm(np.cross(c1, c2), axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        sin_angle = cross / (n1 * n2)
    if np.any(~(n1 > 0)) or np.any(~(n2 > 0)) or np.any(~(sin_angle > np.sin(_GS_MIN_ANGLE))):
        raise DegenerateRotation("rotation columns are zero or parallel")
    r1 = c1 / n1[..., None]
    w = c2 - np.sum(r1 * c2, axis=-1, keepdims=True) * r1
    r2 = w / np.linalg.norm(w, axis=-1, keepdims=True)
    r3 = np.cross(r1, r2)
    return np.stack([r1, r2, r3], axis=-1)


def gram_schmidt_backward(M, dR):
    """Vector-Jacobian product of :func:`gram_schmidt`; returns dL/dM (third column zero)."""
    M = np.asarray(M, dtype=np.float64)
    c1, c2 = M[..., :, 0], M[..., :, 1]
    n1 = np.linalg.norm(c1, axis=-1, keepdims=True)
    r1 = c1 / n1
    d12 = np.sum(r1 * c2, axis=-1, keepdims=True)
    w = c2 - d12 * r1
    nw = np.linalg.norm(w, axis=-1, keepdims=True)
    r2 = w / nw

    g1, g2, g3 = dR[..., :, 0], dR[..., :, 1], dR[..., :, 2]
    # r3 = r1 x r2
    g1 = g1 + np.cross(r2, g3)
    g2 = g2 + np.cross(g3, r1)
    # r2 = w / |w|
    gw = (g2 - r2 * np.sum(r2 * g2, axis=-1, keepdims=True)) / nw
    # w = c2 - (r1 . c2) r1
    rw = np.sum(r1 * gw, axis=-1, keepdims=True)
    gc2 = gw - r1 * rw
    g1 = g1 - d12 * gw - rw * c2
    # r1 = c1 / |c1|
    gc1 = (g1 - r1 * np.sum(r1 * g1, axis=-1, keepdims=True)) / n1

    out = np.zeros_like(M)
    out[..., :, 0] = gc1
    out[..., :, 1] = gc2
    return out


def orthonormalize(raw) -> RigidPose:
    raw = np.asarray(raw, dtype=np.float64).reshape(3, 4)
    return RigidPose(gram_schmidt(raw[:, :3]), raw[:, 3].copy())


def compose(A: RigidPose, B: RigidPose) -> RigidPose:
    return RigidPose(A.R @ B.R, A.R @ B.t + A.t)


def inverse(T: RigidPose) -> RigidPose:
    return RigidPose(T.R.T, -T.R.T @ T.t)


def rotation_angle_deg(Ra, Rb) -> np.ndarray:
    """Angle of ``Ra^T Rb`` in degrees (broadcasts over leading dims).

    Equal to ``arccos((trace - 1) / 2)`` but evaluated with atan2 so small
    angles keep full precision.
    """
    M = np.einsum("...ki,...kj->...ij", Ra, Rb)
    c = (np.einsum("...ii->...", M) - 1.0) / 2.0
    vee = np.stack(
        [M[..., 2, 1] - M[..., 1, 2], M[..., 0, 2] - M[..., 2, 0], M[..., 1, 0] - M[..., 0, 1]], axis=-1
    )
    s = 0.5 * np.linalg.norm(vee, axis=-1)
    return np.clip(np.degrees(np.arctan2(s, c)), 0.0, 180.0)


def pose_error(est: RigidPose, gt: RigidPose) -> tuple[float, float]:
    """(rotation error in degrees, translation error in scene units)."""
    return float(rotation_angle_deg(est.R, gt.R)), float(np.linalg.norm(est.t - gt.t))


def so3_exp(w) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(w, dtype=np.float64)).as_matrix()


def axis_angle(axis, degrees) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    return so3_exp(axis / np.linalg.norm(axis) * np.radians(degrees))


def random_rotation(rng) -> np.ndarray:
    return Rotation.random(random_state=rng).as_matrix()


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> RigidPose:
    """Camera-to-scene pose of a camera at ``eye`` looking at ``target``; ``up`` is scene-up."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return RigidPose(np.stack([x, y, z], axis=1), eye)


def quaternion_from_matrix(R) -> np.ndarray:
    """(w, x, y, z) with non-negative w."""
    x, y, z, w = Rotation.from_matrix(R).as_quat()
    q = np.array([w, x, y, z])
    return -q if q[0] < 0 else q


def matrix_from_quaternion(q) -> np.ndarray:
    w, x, y, z = q
    return Rotation.from_quat([x, y, z, w]).as_matrix()
