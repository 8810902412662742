"""Feature depth from a single LIDAR sweep.

For every image feature the sweep is projected into the image, a pixel
neighborhood is gathered, the foreground is segmented with a depth histogram,
a local plane is fit through the maximum-area triangle of the segment, and the
feature's line of sight is intersected with that plane. Ground features skip
the segmentation and are anchored to a RANSAC-fitted global ground plane
instead. Estimates are rejected on grazing incidence or beyond the trusted
range.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .geometry import (
    CameraIntrinsics,
    ExtrinsicCalibration,
    MIN_DEPTH,
    project_many,
    unproject_ray,
)


class DepthError(Exception):
    pass


class NoNeighbors(DepthError):
    """Fewer than 3 usable LIDAR points around the feature."""


class DegenerateTriangle(DepthError):
    """No point triple spans the required minimum area."""


class ParallelRay(DepthError):
    """Line of sight parallel to the fitted plane."""


class InsufficientInliers(DepthError):
    """RANSAC could not find a plane with enough support."""


class DepthStatus(enum.Enum):
    VALID = "valid"
    REJECTED_ANGLE = "rejected_angle"
    REJECTED_RANGE = "rejected_range"
    REJECTED_DEGENERATE = "rejected_degenerate"
    NO_NEIGHBORS = "no_neighbors"


class DepthSource(enum.Enum):
    FOREGROUND_PLANE = "foreground_plane"
    GROUND_PLANE = "ground_plane"


@dataclass(frozen=True)
class Plane:
    """Plane {x : normal . x == offset} with unit normal."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        norm = np.linalg.norm(n)
        object.__setattr__(self, "normal", n / norm)
        object.__setattr__(self, "offset", float(self.offset) / norm)

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.normal - self.offset

    @classmethod
    def from_points(cls, a, b, c) -> "Plane":
        a, b, c = (np.asarray(p, dtype=float) for p in (a, b, c))
        normal = np.cross(b - a, c - a)
        return cls(normal, float(np.dot(normal, a)))


@dataclass(frozen=True)
class DepthEstimate:
    depth: float
    plane_normal: np.ndarray
    source: DepthSource
    status: DepthStatus

    @property
    def valid(self) -> bool:
        return self.status is DepthStatus.VALID


def _rejected(status: DepthStatus, source=DepthSource.FOREGROUND_PLANE, depth=np.nan, normal=None):
    if normal is None:
        normal = np.full(3, np.nan)
    return DepthEstimate(depth=float(depth), plane_normal=np.asarray(normal, dtype=float), source=source, status=status)


@dataclass
class DepthConfig:
    """Thresholds of the depth extraction chain; lengths in meters unless noted."""

    roi_half_width: int = 5           # pixels; 11 x 11 window
    roi_half_height: int = 5
    ground_roi_half_width: int = 5    # pixels; 11 x 31 window, taller against
    ground_roi_half_height: int = 15  # sparse vertical beam spacing
    histogram_bin_width: float = 0.3
    significant_bin_count: int = 2
    max_depth: float = 30.0
    max_incidence_angle_deg: float = 70.0
    min_triangle_area: float = 1e-4
    min_triangle_area_ground: float = 1e-2
    exhaustive_cap: int = 25
    ground_ransac_iterations: int = 200
    ground_ransac_threshold: float = 0.15
    ground_ransac_min_inlier_ratio: float = 0.2
    ground_vicinity: float = 0.3
    ransac_seed: int = 0

    def __post_init__(self):
        if self.min_triangle_area_ground <= self.min_triangle_area:
            raise ValueError("ground minimum triangle area must exceed the default")
        for name in (
            "roi_half_width", "roi_half_height", "histogram_bin_width",
            "max_depth", "min_triangle_area", "ground_ransac_threshold",
            "ground_vicinity",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


class ProjectedCloud:
    """LIDAR points projected into the image, indexed for rectangle queries.

    Stores pixel coordinates, camera-frame depths and camera-frame points,
    sorted by pixel u so that rectangle queries reduce to a binary search over
    u plus a mask over v. Immutable after construction.
    """

    def __init__(self, pixels: np.ndarray, depths: np.ndarray, xyz_camera: np.ndarray):
        pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
        order = np.argsort(pixels[:, 0], kind="stable")
        self.pixels = pixels[order]
        self.depths = np.asarray(depths, dtype=float)[order]
        self.xyz_camera = np.asarray(xyz_camera, dtype=float).reshape(-1, 3)[order]
        for arr in (self.pixels, self.depths, self.xyz_camera):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.depths)

    def query_rect(self, u_min: float, u_max: float, v_min: float, v_max: float) -> np.ndarray:
        """Indices of points inside the closed rectangle."""
        lo = np.searchsorted(self.pixels[:, 0], u_min, side="left")
        hi = np.searchsorted(self.pixels[:, 0], u_max, side="right")
        v = self.pixels[lo:hi, 1]
        return lo + np.nonzero((v >= v_min) & (v <= v_max))[0]


def project_cloud(
    cloud: np.ndarray, calib: ExtrinsicCalibration, intrinsics: CameraIntrinsics
) -> ProjectedCloud:
    """Project LIDAR-frame points; keeps in-bounds points with positive depth."""
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
    if len(cloud) == 0:
        return ProjectedCloud(np.zeros((0, 2)), np.zeros(0), np.zeros((0, 3)))
    cam = calib.lidar_to_camera.transform(cloud)
    in_front = cam[:, 2] > MIN_DEPTH
    cam = cam[in_front]
    pixels = project_many(cam, intrinsics)
    inside = intrinsics.contains(pixels)
    return ProjectedCloud(pixels[inside], cam[inside, 2], cam[inside])


def select_neighborhood(
    cloud: ProjectedCloud,
    feature: np.ndarray,
    cfg: DepthConfig,
    ground: bool = False,
) -> np.ndarray:
    """Indices of projected points in the ROI rectangle centered at the feature.

    Raises NoNeighbors when fewer than 3 points are found.
    """
    u, v = float(feature[0]), float(feature[1])
    if ground:
        hw, hh = cfg.ground_roi_half_width, cfg.ground_roi_half_height
    else:
        hw, hh = cfg.roi_half_width, cfg.roi_half_height
    idx = cloud.query_rect(u - hw, u + hw, v - hh, v + hh)
    if len(idx) < 3:
        raise NoNeighbors(f"{len(idx)} points in the ROI at ({u:.1f}, {v:.1f})")
    return idx


def segment_foreground(depths: np.ndarray, bin_width: float, min_count: int = 2) -> np.ndarray:
    """Boolean mask of the foreground cluster of a depth neighborhood.

    Depths enter a histogram of the given bin width anchored at the minimum
    depth. The kept cluster is the maximal run of consecutive occupied bins
    containing the nearest bin whose count reaches min_count; if no bin does,
    the nearest occupied bin is used instead.
    """
    depths = np.asarray(depths, dtype=float)
    if depths.size == 0:
        raise ValueError("segment_foreground needs at least one depth")
    bins = np.floor((depths - depths.min()) / bin_width).astype(int)
    counts = np.bincount(bins)
    significant = np.nonzero(counts >= min_count)[0]
    if len(significant) == 0:
        target = int(np.nonzero(counts)[0][0])
    else:
        target = int(significant[0])
    lo = target
    while lo > 0 and counts[lo - 1] > 0:
        lo -= 1
    hi = target
    while hi + 1 < len(counts) and counts[hi + 1] > 0:
        hi += 1
    return (bins >= lo) & (bins <= hi)


_TRIPLE_CACHE: dict[int, np.ndarray] = {}


def _triples(n: int) -> np.ndarray:
    if n not in _TRIPLE_CACHE:
        _TRIPLE_CACHE[n] = np.array(list(combinations(range(n), 3)), dtype=int)
    return _TRIPLE_CACHE[n]


def _max_area_triple(points: np.ndarray) -> tuple[float, np.ndarray]:
    t = _triples(len(points))
    a = points[t[:, 0]]
    ab = points[t[:, 1]] - a
    ac = points[t[:, 2]] - a
    areas = 0.5 * np.linalg.norm(np.cross(ab, ac), axis=1)
    best = int(np.argmax(areas))
    return float(areas[best]), t[best]


def _hull_candidates(points: np.ndarray, cap: int) -> np.ndarray:
    """Indices of convex-hull vertices in the dominant plane of the points."""
    centered = points - points.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    plane_2d = centered @ vt[:2].T
    try:
        hull = ConvexHull(plane_2d)
        idx = np.asarray(hull.vertices, dtype=int)
    except QhullError:
        idx = np.arange(len(points))
    if len(idx) > cap:
        idx = idx[np.linspace(0, len(idx) - 1, cap).astype(int)]
    return idx


def fit_plane_max_triangle(
    points: np.ndarray, min_area: float, exhaustive_cap: int = 25
) -> tuple[Plane, np.ndarray]:
    """Plane through the maximum-area triangle of a point set.

    Exhaustive over all triples up to exhaustive_cap points; beyond that the
    search is restricted to convex-hull vertices of the points projected onto
    their dominant plane (the maximum-area triangle of coplanar points has its
    vertices on that hull). Raises DegenerateTriangle when even the best
    triangle is smaller than min_area.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) < 3:
        raise ValueError("plane fit needs at least 3 points")
    if len(points) <= exhaustive_cap:
        candidates = np.arange(len(points))
    else:
        candidates = _hull_candidates(points, exhaustive_cap)
        if len(candidates) < 3:
            candidates = np.arange(min(len(points), exhaustive_cap))
    area, triple = _max_area_triple(points[candidates])
    if area < min_area:
        raise DegenerateTriangle(f"max triangle area {area:.3e} below {min_area:.3e}")
    chosen = points[candidates[triple]]
    return Plane.from_points(*chosen), chosen


def intersect_ray_plane(ray: np.ndarray, plane: Plane) -> float:
    """Camera-frame depth (z) where a line of sight meets a plane.

    The ray starts at the origin; a negative result means the intersection is
    behind the camera. Raises ParallelRay when the ray lies in the plane
    direction within 1e-9.
    """
    ray = np.asarray(ray, dtype=float)
    denom = float(np.dot(plane.normal, ray))
    if abs(denom) < 1e-9:
        raise ParallelRay("line of sight parallel to plane")
    t = plane.offset / denom
    return float(t * ray[2])


def fit_plane_least_squares(points: np.ndarray) -> Plane:
    """Total-least-squares plane through a point set (SVD of centered points)."""
    points = np.asarray(points, dtype=float)
    centroid = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - centroid, full_matrices=False)
    normal = vt[-1]
    return Plane(normal, float(np.dot(normal, centroid)))


def extract_ground_plane(
    cloud: np.ndarray,
    threshold: float,
    *,
    iterations: int = 200,
    min_inlier_ratio: float = 0.2,
    seed: int = 0,
) -> Plane:
    """RANSAC plane over camera-frame points, refined by least squares.

    The returned normal is oriented toward the camera origin (upward for a
    road surface below the sensor). Raises InsufficientInliers when the best
    candidate supports less than min_inlier_ratio of the cloud.
    """
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
    n = len(cloud)
    if n < 3:
        raise InsufficientInliers(f"{n} points cannot define a plane")
    rng = np.random.default_rng(seed)
    # candidate scoring on a bounded subsample; the final inlier set and the
    # refinement use the full cloud
    if n > 3000:
        score_idx = rng.choice(n, size=3000, replace=False)
        score_cloud = cloud[score_idx]
    else:
        score_cloud = cloud
    samples = rng.integers(0, n, size=(iterations, 3))
    a = cloud[samples[:, 0]]
    normals = np.cross(cloud[samples[:, 1]] - a, cloud[samples[:, 2]] - a)
    norms = np.linalg.norm(normals, axis=1)
    ok = norms > 1e-12
    normals[ok] /= norms[ok, None]
    offsets = np.einsum("ij,ij->i", normals, a)
    distances = np.abs(score_cloud @ normals.T - offsets[None, :])
    counts = np.where(ok, (distances <= threshold).sum(axis=0), -1)
    best = int(np.argmax(counts))
    if counts[best] < max(3, min_inlier_ratio * len(score_cloud)):
        raise InsufficientInliers(
            f"best candidate has {counts[best]}/{len(score_cloud)} inliers"
        )
    inliers = np.abs(cloud @ normals[best] - offsets[best]) <= threshold
    plane = fit_plane_least_squares(cloud[inliers])
    # orient the normal so the camera origin lies on its positive side
    if plane.offset > 0:
        plane = Plane(-plane.normal, -plane.offset)
    return plane


def estimate_depth(
    feature: np.ndarray,
    is_ground: bool,
    cloud: ProjectedCloud,
    ground: Plane | None,
    cfg: DepthConfig,
    intrinsics: CameraIntrinsics,
) -> DepthEstimate:
    """Full one-shot depth chain for a single feature; failures are encoded in
    the returned status, never raised."""
    ray = unproject_ray(feature, intrinsics)
    use_ground = is_ground and ground is not None
    source = DepthSource.GROUND_PLANE if use_ground else DepthSource.FOREGROUND_PLANE
    try:
        idx = select_neighborhood(cloud, feature, cfg, ground=use_ground)
    except NoNeighbors:
        return _rejected(DepthStatus.NO_NEIGHBORS, source)
    points = cloud.xyz_camera[idx]
    if use_ground:
        near_ground = np.abs(ground.signed_distance(points)) <= cfg.ground_vicinity
        points = points[near_ground]
        if len(points) < 3:
            return _rejected(DepthStatus.NO_NEIGHBORS, source)
        min_area = cfg.min_triangle_area_ground
    else:
        mask = segment_foreground(
            cloud.depths[idx], cfg.histogram_bin_width, cfg.significant_bin_count
        )
        points = points[mask]
        if len(points) < 3:
            return _rejected(DepthStatus.NO_NEIGHBORS, source)
        min_area = cfg.min_triangle_area
    try:
        plane, _ = fit_plane_max_triangle(points, min_area, cfg.exhaustive_cap)
        depth = intersect_ray_plane(ray, plane)
    except (DegenerateTriangle, ParallelRay):
        return _rejected(DepthStatus.REJECTED_DEGENERATE, source)
    if depth <= MIN_DEPTH:
        return _rejected(DepthStatus.REJECTED_DEGENERATE, source)
    if use_ground:
        # grazing incidence is inherent to road geometry; the vicinity test
        # against the global ground plane replaces the angle test here
        hit = ray * (depth / ray[2])
        if abs(float(ground.signed_distance(hit))) > cfg.ground_vicinity:
            return _rejected(DepthStatus.REJECTED_DEGENERATE, source, depth, plane.normal)
    else:
        incidence = np.degrees(np.arccos(min(1.0, abs(float(np.dot(plane.normal, ray))))))
        if incidence >= cfg.max_incidence_angle_deg:
            return _rejected(DepthStatus.REJECTED_ANGLE, source, depth, plane.normal)
    if depth > cfg.max_depth:
        return _rejected(DepthStatus.REJECTED_RANGE, source, depth, plane.normal)
    return DepthEstimate(
        depth=depth, plane_normal=plane.normal, source=source, status=DepthStatus.VALID
    )


# ------------------------------------------------------------------ cloud IO


def read_velodyne(path: str | Path) -> np.ndarray:
    """KITTI velodyne scan: flat binary float32 x, y, z, intensity records."""
    data = np.fromfile(str(path), dtype=np.float32)
    if data.size % 4 != 0:
        raise ValueError(f"{path}: size not a multiple of 4 floats")
    return data.reshape(-1, 4)[:, :3].astype(float)


def read_cloud_text(path: str | Path) -> np.ndarray:
    """Whitespace-separated x y z per line (test fixtures)."""
    pts = np.loadtxt(str(path), dtype=float)
    if pts.size == 0:
        return np.zeros((0, 3))
    return np.atleast_2d(pts)[:, :3]
