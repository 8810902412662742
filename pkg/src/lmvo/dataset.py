"""Dataset access: KITTI odometry directory layout and in-memory sequences."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image

from .depth import read_velodyne
from .geometry import CameraIntrinsics, ExtrinsicCalibration, Pose
from .tracking import ClassTable, FeatureTrack, SemanticImage, ingest_tracks

logger = logging.getLogger("lmvo.dataset")


class DatasetError(Exception):
    pass


class MissingFile(DatasetError):
    pass


class MalformedCalibration(DatasetError):
    pass


@dataclass
class DatasetSequence:
    """Index-aligned frame sources; loaders may be lazy.

    Poses follow the package convention (camera-from-world); the KITTI poses
    file stores camera-to-world and is inverted on load.
    """

    intrinsics: CameraIntrinsics
    extrinsics: ExtrinsicCalibration
    timestamps: np.ndarray
    cloud_fn: Callable[[int], np.ndarray]
    image_fn: Callable[[int], np.ndarray] | None = None
    semantic_fn: Callable[[int], SemanticImage] | None = None
    ground_truth: list[Pose] | None = None
    tracks: list[FeatureTrack] | None = None
    name: str = "sequence"

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    @property
    def n_frames(self) -> int:
        return len(self.timestamps)

    def cloud(self, i: int) -> np.ndarray:
        return self.cloud_fn(i)

    def image(self, i: int) -> np.ndarray | None:
        return None if self.image_fn is None else self.image_fn(i)

    def semantic(self, i: int) -> SemanticImage | None:
        return None if self.semantic_fn is None else self.semantic_fn(i)


def _parse_calib(path: Path) -> dict[str, np.ndarray]:
    entries: dict[str, np.ndarray] = {}
    with open(path) as handle:
        for line_no, line in enumerate(handle, start=1):
            text = line.strip()
            if not text:
                continue
            if ":" not in text:
                raise MalformedCalibration(f"{path}:{line_no}: missing key separator")
            key, _, rest = text.partition(":")
            values = rest.split()
            if len(values) != 12:
                raise MalformedCalibration(
                    f"{path}:{line_no}: expected 12 values for {key.strip()}, got {len(values)}"
                )
            try:
                entries[key.strip()] = np.array([float(v) for v in values]).reshape(3, 4)
            except ValueError:
                raise MalformedCalibration(f"{path}:{line_no}: non-numeric value") from None
    return entries


def read_pose_file(path: str | Path) -> list[Pose]:
    """KITTI pose lines (12-value camera-to-world) as camera-from-world Poses."""
    poses = []
    with open(path) as handle:
        for line_no, line in enumerate(handle, start=1):
            text = line.strip()
            if not text:
                continue
            values = [float(v) for v in text.split()]
            if len(values) != 12:
                raise DatasetError(f"{path}:{line_no}: expected 12 values")
            cam_to_world = np.array(values).reshape(3, 4)
            poses.append(Pose(cam_to_world[:, :3], cam_to_world[:, 3]).inverse())
    return poses


def load_image_grayscale(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=float)


def load_kitti_sequence(
    path: str | Path, classes: ClassTable | None = None
) -> DatasetSequence:
    """Load a KITTI odometry sequence directory.

    Required: image_0/, velodyne/, calib.txt, times.txt. Optional: poses.txt
    (ground truth), semantics/ (8-bit label images), tracks.txt (precomputed
    feature tracks). Frame count is the minimum over the sources; a mismatch
    is logged as a warning.
    """
    root = Path(path)
    if not root.is_dir():
        raise MissingFile(f"sequence directory {root} not found")
    for required in ("calib.txt", "times.txt", "image_0", "velodyne"):
        if not (root / required).exists():
            raise MissingFile(f"{root / required} missing")

    calib = _parse_calib(root / "calib.txt")
    if "P0" not in calib:
        raise MalformedCalibration(f"{root / 'calib.txt'}: no P0 entry")
    if "Tr" not in calib:
        raise MalformedCalibration(f"{root / 'calib.txt'}: no Tr entry")
    p0 = calib["P0"]

    image_paths = sorted((root / "image_0").glob("*.png"))
    cloud_paths = sorted((root / "velodyne").glob("*.bin"))
    if not image_paths:
        raise MissingFile(f"{root / 'image_0'}: no png frames")
    if not cloud_paths:
        raise MissingFile(f"{root / 'velodyne'}: no bin frames")
    with Image.open(image_paths[0]) as first:
        width, height = first.size
    intrinsics = CameraIntrinsics(
        fx=float(p0[0, 0]), fy=float(p0[1, 1]),
        cx=float(p0[0, 2]), cy=float(p0[1, 2]),
        width=width, height=height,
    )
    extrinsics = ExtrinsicCalibration(Pose(calib["Tr"][:, :3], calib["Tr"][:, 3]))

    timestamps = np.loadtxt(root / "times.txt", dtype=float, ndmin=1)
    counts = {
        "times": len(timestamps),
        "images": len(image_paths),
        "clouds": len(cloud_paths),
    }
    ground_truth = None
    if (root / "poses.txt").exists():
        ground_truth = read_pose_file(root / "poses.txt")
        counts["poses"] = len(ground_truth)
    semantic_paths = None
    if (root / "semantics").is_dir():
        semantic_paths = sorted((root / "semantics").glob("*.png"))
        counts["semantics"] = len(semantic_paths)
    n = min(counts.values())
    if len(set(counts.values())) > 1:
        logger.warning("%s: source frame counts differ %s; using %d", root, counts, n)
    if ground_truth is not None:
        ground_truth = ground_truth[:n]

    table = classes or ClassTable()

    def cloud_fn(i: int) -> np.ndarray:
        return read_velodyne(cloud_paths[i])

    def image_fn(i: int) -> np.ndarray:
        return load_image_grayscale(image_paths[i])

    semantic_fn = None
    if semantic_paths:
        def semantic_fn(i: int) -> SemanticImage:
            with Image.open(semantic_paths[i]) as img:
                labels = np.asarray(img.convert("L"), dtype=np.uint8)
            return SemanticImage(labels, table)

    tracks = None
    if (root / "tracks.txt").exists():
        tracks = ingest_tracks(root / "tracks.txt")

    return DatasetSequence(
        intrinsics=intrinsics,
        extrinsics=extrinsics,
        timestamps=timestamps[:n],
        cloud_fn=cloud_fn,
        image_fn=image_fn,
        semantic_fn=semantic_fn,
        ground_truth=ground_truth,
        tracks=tracks,
        name=root.name,
    )


def write_kitti_sequence(
    root: str | Path,
    sequence: DatasetSequence,
    *,
    write_images: bool = True,
    write_semantics: bool = True,
    write_tracks: bool = True,
) -> None:
    """Materialize a sequence to disk in the KITTI odometry layout."""
    from .evaluate import write_trajectory
    from .tracking import write_tracks as write_track_file

    root = Path(root)
    (root / "velodyne").mkdir(parents=True, exist_ok=True)
    k = sequence.intrinsics
    p_row = f"{k.fx:.12e} 0.000000000000e+00 {k.cx:.12e} 0.000000000000e+00 " \
            f"0.000000000000e+00 {k.fy:.12e} {k.cy:.12e} 0.000000000000e+00 " \
            "0.000000000000e+00 0.000000000000e+00 1.000000000000e+00 0.000000000000e+00"
    tr = sequence.extrinsics.lidar_to_camera
    tr_vals = np.column_stack([tr.rotation, tr.translation]).ravel()
    tr_row = " ".join(f"{v:.12e}" for v in tr_vals)
    lines = [f"P{i}: {p_row}" for i in range(4)] + [f"Tr: {tr_row}"]
    (root / "calib.txt").write_text("\n".join(lines) + "\n")
    np.savetxt(root / "times.txt", sequence.timestamps, fmt="%.6e")

    for i in range(sequence.n_frames):
        cloud = sequence.cloud(i).astype(np.float32)
        records = np.column_stack([cloud, np.zeros(len(cloud), dtype=np.float32)])
        records.astype(np.float32).tofile(root / "velodyne" / f"{i:06d}.bin")

    if write_images and sequence.image_fn is not None:
        (root / "image_0").mkdir(exist_ok=True)
        for i in range(sequence.n_frames):
            img = np.clip(sequence.image(i), 0, 255).astype(np.uint8)
            Image.fromarray(img, mode="L").save(root / "image_0" / f"{i:06d}.png")

    if write_semantics and sequence.semantic_fn is not None:
        (root / "semantics").mkdir(exist_ok=True)
        for i in range(sequence.n_frames):
            labels = sequence.semantic(i).labels.astype(np.uint8)
            Image.fromarray(labels, mode="L").save(root / "semantics" / f"{i:06d}.png")

    if sequence.ground_truth is not None:
        write_trajectory(sequence.ground_truth, root / "poses.txt")

    if write_tracks and sequence.tracks is not None:
        write_track_file(sequence.tracks, root / "tracks.txt")
