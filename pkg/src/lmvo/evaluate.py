"""Trajectory output and the KITTI relative-error metric."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Pose

SEGMENT_LENGTHS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)


class TooShort(Exception):
    """Trajectory shorter than the smallest evaluation segment."""


class IoError(Exception):
    pass


# -------------------------------------------------------------- trajectory IO


def write_trajectory(poses: list[Pose], path: str | Path) -> None:
    """KITTI format: 12 space-separated values per line, row-major 3x4
    camera-to-world matrix (poses are camera-from-world internally)."""
    try:
        with open(path, "w") as handle:
            for pose in poses:
                cam_to_world = pose.inverse()
                values = np.column_stack(
                    [cam_to_world.rotation, cam_to_world.translation]
                ).ravel()
                handle.write(" ".join(f"{v:.12g}" for v in values) + "\n")
    except OSError as exc:
        raise IoError(str(exc)) from exc


def read_trajectory(path: str | Path) -> list[Pose]:
    """Inverse of write_trajectory (returns camera-from-world poses)."""
    poses = []
    try:
        with open(path) as handle:
            for line_no, line in enumerate(handle, start=1):
                text = line.strip()
                if not text:
                    continue
                values = [float(v) for v in text.split()]
                if len(values) != 12:
                    raise IoError(f"{path}:{line_no}: expected 12 values")
                mat = np.array(values).reshape(3, 4)
                poses.append(Pose(mat[:, :3], mat[:, 3]).inverse())
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return poses


# ------------------------------------------------------------------- metric


@dataclass
class SegmentError:
    first_frame: int
    length: float
    t_err: float          # unitless ratio (translation error / length)
    r_err: float          # rad per meter
    speed: float          # m/s


@dataclass
class ErrorReport:
    """Relative errors per (start frame, segment length), with averages."""

    segments: list[SegmentError] = field(default_factory=list)

    def by_length(self) -> dict[float, tuple[float, float]]:
        """length -> (translation error %, rotation error deg/m)."""
        out = {}
        for length in sorted({s.length for s in self.segments}):
            subset = [s for s in self.segments if s.length == length]
            t = float(np.mean([s.t_err for s in subset])) * 100.0
            r = float(np.degrees(np.mean([s.r_err for s in subset])))
            out[length] = (t, r)
        return out

    def by_speed(self, bucket: float = 2.0) -> dict[float, tuple[float, float]]:
        """speed bucket lower edge (m/s) -> (t_err %, r_err deg/m)."""
        out = {}
        keys = sorted({np.floor(s.speed / bucket) * bucket for s in self.segments})
        for key in keys:
            subset = [s for s in self.segments if np.floor(s.speed / bucket) * bucket == key]
            t = float(np.mean([s.t_err for s in subset])) * 100.0
            r = float(np.degrees(np.mean([s.r_err for s in subset])))
            out[float(key)] = (t, r)
        return out

    @property
    def mean_translation_error_pct(self) -> float:
        return float(np.mean([s.t_err for s in self.segments])) * 100.0

    @property
    def mean_rotation_error_deg_per_m(self) -> float:
        return float(np.degrees(np.mean([s.r_err for s in self.segments])))


def _trajectory_distances(centers: np.ndarray) -> np.ndarray:
    steps = np.linalg.norm(np.diff(centers, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def _first_frame_beyond(dist: np.ndarray, first: int, length: float) -> int:
    beyond = np.nonzero(dist > dist[first] + length)[0]
    beyond = beyond[beyond > first]
    return int(beyond[0]) if len(beyond) else -1


def kitti_metric(
    estimated: list[Pose],
    truth: list[Pose],
    *,
    lengths: tuple[float, ...] = SEGMENT_LENGTHS,
    step: int = 1,
    timestamps: np.ndarray | None = None,
) -> ErrorReport:
    """Relative translation (ratio) and rotation (rad/m) errors over fixed
    segment lengths, following the reference KITTI evaluation semantics.

    Poses are camera-from-world; segment start frames advance by `step`
    (1 evaluates every start frame). Raises TooShort when the ground-truth
    path cannot fit the smallest segment.
    """
    if len(estimated) != len(truth):
        raise ValueError("trajectories must have equal length")
    est_mats = np.array([p.inverse().to_matrix() for p in estimated])
    gt_mats = np.array([p.inverse().to_matrix() for p in truth])
    dist = _trajectory_distances(gt_mats[:, :3, 3])
    if dist[-1] <= min(lengths):
        raise TooShort(
            f"path length {dist[-1]:.1f} m below smallest segment {min(lengths)} m"
        )
    if timestamps is None:
        timestamps = 0.1 * np.arange(len(truth))
    report = ErrorReport()
    for first in range(0, len(truth), step):
        for length in lengths:
            last = _first_frame_beyond(dist, first, length)
            if last < 0:
                continue
            delta_gt = np.linalg.inv(gt_mats[first]) @ gt_mats[last]
            delta_est = np.linalg.inv(est_mats[first]) @ est_mats[last]
            error = np.linalg.inv(delta_est) @ delta_gt
            trace = np.trace(error[:3, :3])
            angle = float(np.arccos(np.clip(0.5 * (trace - 1.0), -1.0, 1.0)))
            t_norm = float(np.linalg.norm(error[:3, 3]))
            elapsed = float(timestamps[last] - timestamps[first])
            speed = length / elapsed if elapsed > 0 else 0.0
            report.segments.append(
                SegmentError(first, length, t_norm / length, angle / length, speed)
            )
    if not report.segments:
        raise TooShort("no segment fits inside the trajectory")
    return report


def write_report(report: ErrorReport, path: str | Path) -> None:
    """Per-length averages as CSV: segment_length, t_err_pct, r_err_deg_per_m."""
    try:
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["segment_length", "t_err_pct", "r_err_deg_per_m"])
            for length, (t, r) in report.by_length().items():
                writer.writerow([f"{length:g}", f"{t:.6f}", f"{r:.8f}"])
    except OSError as exc:
        raise IoError(str(exc)) from exc


def endpoint_drift(estimated: list[Pose], truth: list[Pose]) -> float:
    """Final-position error as a fraction of the ground-truth path length."""
    est_end = estimated[-1].inverse().translation
    gt_end = truth[-1].inverse().translation
    centers = np.array([p.inverse().translation for p in truth])
    path = float(_trajectory_distances(centers)[-1])
    return float(np.linalg.norm(est_end - gt_end)) / max(path, 1e-12)
