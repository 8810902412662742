"""Rigid transforms, pinhole camera model, epipolar geometry and triangulation.

Conventions used throughout the package:
  * camera frame: x right, y down, z forward (depth = z coordinate)
  * Pose maps points from its source frame into its target frame, i.e. a
    camera pose stored as camera-from-world maps world points into the camera
  * pixels are (u, v) with u along image width
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GeometryError(Exception):
    pass


class NonPositiveDepth(GeometryError):
    """Point lies on or behind the image plane."""


class DegenerateGeometry(GeometryError):
    """Triangulation rays are (near) parallel."""


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix so that skew(a) @ b == cross(a, b)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula mapping an axis-angle vector to a rotation matrix."""
    w = np.asarray(w, dtype=float)
    angle = float(np.linalg.norm(w))
    k = skew(w)
    if angle < 1e-8:
        # second-order series, accurate to ~1e-16 at this magnitude
        return np.eye(3) + k + 0.5 * (k @ k)
    return (
        np.eye(3)
        + (np.sin(angle) / angle) * k
        + ((1.0 - np.cos(angle)) / angle**2) * (k @ k)
    )


def rotation_log(R: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix (inverse of rotation_exp)."""
    trace = float(np.trace(R))
    cos_angle = min(1.0, max(-1.0, 0.5 * (trace - 1.0)))
    angle = float(np.arccos(cos_angle))
    vee = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < 1e-8:
        return vee
    if np.pi - angle < 1e-6:
        # near-pi: extract axis from the symmetric part
        diag = np.diag(R)
        i = int(np.argmax(diag))
        axis = np.zeros(3)
        axis[i] = np.sqrt(max(0.0, (diag[i] + 1.0) * 0.5))
        j, k = (i + 1) % 3, (i + 2) % 3
        axis[j] = R[i, j] / (2.0 * axis[i])
        axis[k] = R[i, k] / (2.0 * axis[i])
        if np.dot(axis, vee) < 0.0:
            axis = -axis
        return axis * angle
    return vee * (angle / np.sin(angle))


@dataclass(frozen=True)
class Pose:
    """Rigid transform with a 3x3 rotation matrix and a 3-vector translation.

    Immutable; the stored arrays are copied and marked read-only.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_axis_angle(cls, w, t) -> "Pose":
        return cls(rotation_exp(np.asarray(w, dtype=float)), t)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def to_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "Pose") -> "Pose":
        """self applied after other: (self * other)(x) = self(other(x))."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Pose":
        r_inv = self.rotation.T
        return Pose(r_inv, -r_inv @ self.translation)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply to a single 3-vector or an (n, 3) array of points."""
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            return self.rotation @ points + self.translation
        return points @ self.rotation.T + self.translation

    def rotation_angle(self) -> float:
        """Magnitude of the rotation in radians."""
        return float(np.linalg.norm(rotation_log(self.rotation)))

    def plus(self, delta: np.ndarray) -> "Pose":
        """Local update: left-multiplied rotation increment, additive translation.

        delta = (dwx, dwy, dwz, dtx, dty, dtz).
        """
        delta = np.asarray(delta, dtype=float)
        return Pose(
            rotation_exp(delta[:3]) @ self.rotation,
            self.translation + delta[3:],
        )


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def inverse(p: Pose) -> Pose:
    return p.inverse()


def transform_point(p: Pose, x: np.ndarray) -> np.ndarray:
    return p.transform(x)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera: focal lengths and principal point in pixels."""

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
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def matrix_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def contains(self, pixels: np.ndarray) -> np.ndarray:
        """Boolean mask of pixels inside the image bounds."""
        pixels = np.atleast_2d(np.asarray(pixels, dtype=float))
        return (
            (pixels[:, 0] >= 0.0)
            & (pixels[:, 0] <= self.width - 1)
            & (pixels[:, 1] >= 0.0)
            & (pixels[:, 1] <= self.height - 1)
        )


@dataclass(frozen=True)
class ExtrinsicCalibration:
    """Mounting transform taking LIDAR-frame points into the camera frame."""

    lidar_to_camera: Pose


MIN_DEPTH = 1e-9


def project(point: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Project a camera-frame point to pixel coordinates.

    Raises NonPositiveDepth if the point is on or behind the image plane.
    The result may lie outside the image bounds.
    """
    x, y, z = np.asarray(point, dtype=float)
    if z <= MIN_DEPTH:
        raise NonPositiveDepth(f"point depth {z} is not positive")
    return np.array(
        [intrinsics.fx * x / z + intrinsics.cx, intrinsics.fy * y / z + intrinsics.cy]
    )


def project_many(points: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Vectorized projection of (n, 3) camera-frame points; no depth check."""
    points = np.asarray(points, dtype=float)
    z = points[:, 2]
    u = intrinsics.fx * points[:, 0] / z + intrinsics.cx
    v = intrinsics.fy * points[:, 1] / z + intrinsics.cy
    return np.column_stack([u, v])


def unproject_ray(pixel: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Unit-norm line of sight through a pixel, in the camera frame."""
    u, v = np.asarray(pixel, dtype=float)
    ray = np.array([(u - intrinsics.cx) / intrinsics.fx, (v - intrinsics.cy) / intrinsics.fy, 1.0])
    return ray / np.linalg.norm(ray)


def backproject(pixel: np.ndarray, depth: float, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Camera-frame point at the given z-depth along the pixel's line of sight."""
    u, v = np.asarray(pixel, dtype=float)
    return np.array(
        [
            (u - intrinsics.cx) / intrinsics.fx * depth,
            (v - intrinsics.cy) / intrinsics.fy * depth,
            depth,
        ]
    )


def fundamental_matrix(motion: Pose, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Fundamental matrix of a relative motion, in pixel coordinates.

    `motion` maps previous-frame points into the current frame; the returned F
    satisfies cur_h @ F @ prev_h == 0 for true correspondences in homogeneous
    pixels. Normalized to unit Frobenius norm so residual magnitudes are
    comparable across frames. Only the translation direction enters, so F is
    invariant to the translation scale. For (near-)pure rotation there is no
    epipolar constraint; we fall back to the rotation-only matrix
    K^-T R K^-1, which is degenerate but finite.
    """
    k_inv = intrinsics.matrix_inv
    t = motion.translation
    norm_t = np.linalg.norm(t)
    if norm_t < 1e-12:
        essential = motion.rotation
    else:
        essential = skew(t / norm_t) @ motion.rotation
    f = k_inv.T @ essential @ k_inv
    return f / np.linalg.norm(f)


def triangulate(
    obs_a: np.ndarray,
    obs_b: np.ndarray,
    pose_a: Pose,
    pose_b: Pose,
    intrinsics: CameraIntrinsics,
) -> np.ndarray:
    """Two-view linear (DLT) triangulation; poses are camera-from-world.

    Raises DegenerateGeometry when the viewing rays are parallel within 1e-8,
    which includes identical camera centers. The returned point may lie behind
    a camera; cheirality is the caller's concern.
    """
    center_a = -pose_a.rotation.T @ pose_a.translation
    center_b = -pose_b.rotation.T @ pose_b.translation
    if np.linalg.norm(center_a - center_b) < 1e-9:
        raise DegenerateGeometry("camera centers coincide")
    ray_a = pose_a.rotation.T @ unproject_ray(obs_a, intrinsics)
    ray_b = pose_b.rotation.T @ unproject_ray(obs_b, intrinsics)
    if np.linalg.norm(np.cross(ray_a, ray_b)) < 1e-8:
        raise DegenerateGeometry("viewing rays are parallel")
    return triangulate_linear(
        np.array([obs_a, obs_b]), [pose_a, pose_b], intrinsics
    )


def triangulate_linear(
    observations: np.ndarray, poses: list[Pose], intrinsics: CameraIntrinsics
) -> np.ndarray:
    """Multi-view DLT: least-squares point for >= 2 pixel observations."""
    k = intrinsics.matrix
    rows = []
    for obs, pose in zip(np.asarray(observations, dtype=float), poses):
        p = k @ np.column_stack([pose.rotation, pose.translation])
        rows.append(obs[0] * p[2] - p[0])
        rows.append(obs[1] * p[2] - p[1])
    a = np.array(rows)
    _, _, vt = np.linalg.svd(a)
    hom = vt[-1]
    if abs(hom[3]) < 1e-15:
        raise DegenerateGeometry("point at infinity")
    return hom[:3] / hom[3]
