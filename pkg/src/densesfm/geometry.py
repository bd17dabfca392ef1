"""Pinhole cameras, rigid poses, projection, triangulation and epipolar checks.

Poses map world to camera coordinates: ``x_cam = R @ x_world + t``.
Intrinsics follow the undistorted pinhole model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import BehindCamera, CheiralityFailure, DegenerateGeometry

MIN_DEPTH = 1e-12


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def params(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy], dtype=float)

    def with_params(self, params: Sequence[float]) -> "CameraIntrinsics":
        fx, fy, cx, cy = (float(v) for v in params)
        return CameraIntrinsics(fx, fy, cx, cy, self.width, self.height)

    def contains(self, uv, margin: float = 0.0) -> bool:
        """True when ``uv`` lies in ``[-0.5 - margin, size - 0.5 + margin)``."""
        u, v = float(uv[0]), float(uv[1])
        return (
            -0.5 - margin <= u < self.width - 0.5 + margin
            and -0.5 - margin <= v < self.height - 0.5 + margin
        )


@dataclass(frozen=True, eq=False)
class CameraPose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with det +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_center(cls, rotation, center) -> "CameraPose":
        R = np.asarray(rotation, dtype=float)
        return cls(R, -R @ np.asarray(center, dtype=float))

    @classmethod
    def look_at(cls, center, target, up=(0.0, 0.0, 1.0)) -> "CameraPose":
        """Camera at ``center`` with its optical axis through ``target``."""
        center = np.asarray(center, dtype=float)
        z = np.asarray(target, dtype=float) - center
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=float))
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, np.array([0.0, 1.0, 0.0]))
        x /= np.linalg.norm(x)
        # image y points down, so the camera's up is -y
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls.from_center(R, center)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def transform(self, points: np.ndarray) -> np.ndarray:
        """World points (N, 3) or (3,) to camera coordinates."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def projection_matrix(self, k: CameraIntrinsics | None = None) -> np.ndarray:
        P = np.hstack([self.rotation, self.translation[:, None]])
        return P if k is None else k.matrix @ P

    def compose_left(self, delta_rotation: np.ndarray, delta_translation) -> "CameraPose":
        """Apply ``x -> dR x + dt`` after this pose."""
        dR = np.asarray(delta_rotation, dtype=float)
        return CameraPose(
            orthonormalize(dR @ self.rotation), dR @ self.translation + np.asarray(delta_translation)
        )


def skew(v) -> np.ndarray:
    x, y, z = (float(c) for c in v)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotvec_to_matrix(w) -> np.ndarray:
    """Rodrigues' formula."""
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    K = skew(w)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return (
        np.eye(3)
        + (np.sin(theta) / theta) * K
        + ((1.0 - np.cos(theta)) / theta**2) * K @ K
    )


def rotation_angle(R) -> float:
    """Rotation angle of ``R`` in radians."""
    R = np.asarray(R, dtype=float)
    # atan2 keeps full precision near 0 and pi, where arccos of the trace does not
    c = (np.trace(R) - 1.0) / 2.0
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(s, c))


def orthonormalize(R) -> np.ndarray:
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=float))
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] *= -1
        Q = U @ Vt
    return Q


def qvec_to_rotmat(q) -> np.ndarray:
    """COLMAP quaternion ``(qw, qx, qy, qz)`` to a rotation matrix."""
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * y * y - 2 * z * z, 2 * x * y - 2 * w * z, 2 * z * x + 2 * w * y],
            [2 * x * y + 2 * w * z, 1 - 2 * x * x - 2 * z * z, 2 * y * z - 2 * w * x],
            [2 * z * x - 2 * w * y, 2 * y * z + 2 * w * x, 1 - 2 * x * x - 2 * y * y],
        ]
    )


def rotmat_to_qvec(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    Rxx, Ryx, Rzx, Rxy, Ryy, Rzy, Rxz, Ryz, Rzz = R.flat
    K = np.array(
        [
            [Rxx - Ryy - Rzz, 0, 0, 0],
            [Ryx + Rxy, Ryy - Rxx - Rzz, 0, 0],
            [Rzx + Rxz, Rzy + Ryz, Rzz - Rxx - Ryy, 0],
            [Ryz - Rzy, Rzx - Rxz, Rxy - Ryx, Rxx + Ryy + Rzz],
        ]
    ) / 3.0
    vals, vecs = np.linalg.eigh(K)
    q = vecs[[3, 0, 1, 2], np.argmax(vals)]
    if q[0] < 0:
        q = -q
    return q


def project(point, pose: CameraPose, k: CameraIntrinsics) -> np.ndarray:
    """Project a world point to pixel coordinates."""
    xc = pose.transform(np.asarray(point, dtype=float).reshape(3))
    z = xc[2]
    if z <= MIN_DEPTH:
        raise BehindCamera(f"point has depth {z:.3g}")
    return np.array([k.fx * xc[0] / z + k.cx, k.fy * xc[1] / z + k.cy])


def project_points(points, pose: CameraPose, k: CameraIntrinsics):
    """Vectorised projection; returns ``(uv (N, 2), depth (N,))`` without raising."""
    xc = pose.transform(np.atleast_2d(np.asarray(points, dtype=float)))
    z = xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([k.fx * xc[:, 0] / z + k.cx, k.fy * xc[:, 1] / z + k.cy], axis=1)
    return uv, z


def depth(point, pose: CameraPose) -> float:
    return float(pose.transform(np.asarray(point, dtype=float).reshape(3))[2])


def reprojection_error(point, pose: CameraPose, k: CameraIntrinsics, obs) -> float:
    return float(np.linalg.norm(project(point, pose, k) - np.asarray(obs, dtype=float)))


def pixel_ray(uv, pose: CameraPose, k: CameraIntrinsics):
    """Unit world-space ray direction through pixel ``uv`` and the camera center."""
    d_cam = np.array([(uv[0] - k.cx) / k.fx, (uv[1] - k.cy) / k.fy, 1.0])
    d = pose.rotation.T @ d_cam
    return pose.center, d / np.linalg.norm(d)


def _dlt_rows(pose: CameraPose, k: CameraIntrinsics, uv) -> np.ndarray:
    # normalised image coordinates keep the system well conditioned
    xn = (uv[0] - k.cx) / k.fx
    yn = (uv[1] - k.cy) / k.fy
    P = pose.projection_matrix()
    return np.stack([xn * P[2] - P[0], yn * P[2] - P[1]])


def dlt_system(observations: Iterable) -> np.ndarray:
    """Stacked ``(2n, 4)`` DLT matrix for ``(pose, intrinsics, pixel)`` triples."""
    return np.vstack([_dlt_rows(pose, k, np.asarray(uv, dtype=float)) for pose, k, uv in observations])


def triangulate(observations: Sequence) -> np.ndarray:
    """Homogeneous DLT triangulation from two or more calibrated views.

    Parameters
    ----------
    observations : sequence of (CameraPose, CameraIntrinsics, pixel)

    Raises
    ------
    DegenerateGeometry
        Fewer than two views, coincident centers, or a rank-deficient system.
    CheiralityFailure
        The point is behind more than half of the cameras.
    """
    observations = list(observations)
    if len(observations) < 2:
        raise DegenerateGeometry("triangulation needs at least two views")
    centers = np.array([pose.center for pose, _, _ in observations])
    spread = np.max(np.linalg.norm(centers - centers[0], axis=1))
    scale = 1.0 + np.max(np.linalg.norm(centers, axis=1))
    if spread <= 1e-12 * scale:
        raise DegenerateGeometry("camera centers coincide")

    A = dlt_system(observations)
    _, s, Vt = np.linalg.svd(A)
    if s[-2] <= 1e-12 * s[0]:
        raise DegenerateGeometry("DLT system is rank deficient")
    X = Vt[-1]
    if abs(X[3]) <= 1e-12 * np.linalg.norm(X[:3]):
        raise DegenerateGeometry("point at infinity")
    X = X[:3] / X[3]

    depths = np.array([depth(X, pose) for pose, _, _ in observations])
    if 2 * int(np.sum(depths > 0)) < len(depths):
        raise CheiralityFailure(f"positive depth in {int(np.sum(depths > 0))}/{len(depths)} views")
    return X


def fundamental_matrix(pose_a: CameraPose, pose_b: CameraPose, ka: CameraIntrinsics, kb: CameraIntrinsics):
    """Fundamental matrix with ``x_b^T F x_a = 0``."""
    R = pose_b.rotation @ pose_a.rotation.T
    t = pose_b.translation - R @ pose_a.translation
    scale = 1.0 + np.linalg.norm(pose_a.translation) + np.linalg.norm(pose_b.translation)
    if np.linalg.norm(t) <= 1e-12 * scale:
        raise DegenerateGeometry("zero baseline")
    E = skew(t) @ R
    return np.linalg.inv(kb.matrix).T @ E @ np.linalg.inv(ka.matrix)


def sampson_distance(F: np.ndarray, pa, pb) -> float:
    """First-order geometric (Sampson) distance in pixels."""
    xa = np.array([pa[0], pa[1], 1.0])
    xb = np.array([pb[0], pb[1], 1.0])
    Fa = F @ xa
    Fb = F.T @ xb
    num = float(xb @ Fa)
    den = Fa[0] ** 2 + Fa[1] ** 2 + Fb[0] ** 2 + Fb[1] ** 2
    if den <= 0.0:
        return 0.0 if num == 0.0 else float("inf")
    return abs(num) / np.sqrt(den)


def epipolar_distance(pa, pb, pose_a: CameraPose, pose_b: CameraPose, ka: CameraIntrinsics, kb: CameraIntrinsics) -> float:
    return sampson_distance(fundamental_matrix(pose_a, pose_b, ka, kb), pa, pb)
