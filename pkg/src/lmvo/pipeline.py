"""End-to-end odometry: tracking, depth attachment, motion prior, keyframe BA.

Two modes: "prior_only" chains the frame-to-frame estimates; "full" adds
keyframe selection and windowed bundle adjustment, with non-keyframe poses
extrapolated from the latest optimized keyframe by the accumulated prior.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .backend import (
    FrameClass,
    Keyframe,
    KeyframeSelector,
    WindowDiagnostics,
    build_and_solve_window,
    classify_frame,
    select_landmarks,
    window_length,
)
from .config import PipelineConfig
from .dataset import DatasetSequence
from .depth import (
    DepthStatus,
    InsufficientInliers,
    Plane,
    estimate_depth,
    extract_ground_plane,
    project_cloud,
)
from .evaluate import ErrorReport, TooShort, kitti_metric
from .frame2frame import FrameMatchSet, Match, Underconstrained, estimate_prior
from .geometry import Pose, unproject_ray
from .solver import EmptyProblem
from .tracking import (
    FeatureTrack,
    SemanticImage,
    detect_corners,
    semantic_filter,
    track_features,
)

logger = logging.getLogger("lmvo.pipeline")


class PipelineError(Exception):
    def __init__(self, frame_id: int, message: str):
        super().__init__(f"frame {frame_id}: {message}")
        self.frame_id = frame_id


@dataclass
class PipelineResult:
    trajectory: list[Pose]               # camera-from-world, one per frame
    keyframe_ids: list[int]
    diagnostics: list[WindowDiagnostics]
    report: ErrorReport | None = None
    tracks: list[FeatureTrack] = field(default_factory=list)


class LiveTracker:
    """Corner tracking across the sequence with track replenishment."""

    def __init__(self, cfg, max_tracks=400):
        self.cfg = cfg
        self.max_tracks = max_tracks
        self.tracks: dict[int, FeatureTrack] = {}
        self.active: dict[int, np.ndarray] = {}
        self.prev_image: np.ndarray | None = None
        self.next_id = 0

    def _spawn(self, image, frame_id):
        corners = detect_corners(image, self.cfg)
        existing = np.array(list(self.active.values())) if self.active else np.zeros((0, 2))
        for corner in corners:
            if len(self.active) >= self.max_tracks:
                break
            if len(existing) and np.min(np.linalg.norm(existing - corner, axis=1)) < self.cfg.nms_radius:
                continue
            tid = self.next_id
            self.next_id += 1
            track = FeatureTrack(tid)
            track.add(frame_id, corner)
            self.tracks[tid] = track
            self.active[tid] = corner
            existing = np.vstack([existing, corner[None]]) if len(existing) else corner[None]

    def process(self, frame_id: int, image: np.ndarray) -> None:
        if self.prev_image is None:
            self._spawn(image, frame_id)
            self.prev_image = image
            return
        ids = list(self.active.keys())
        points = np.array([self.active[t] for t in ids])
        matches = track_features(self.prev_image, image, points, self.cfg)
        by_prev = {m[0].tobytes(): m[1] for m in matches}
        survivors: dict[int, np.ndarray] = {}
        for tid, point in zip(ids, points):
            hit = by_prev.get(point.tobytes())
            if hit is not None:
                self.tracks[tid].add(frame_id, hit)
                survivors[tid] = hit
        self.active = survivors
        if len(self.active) < 0.7 * self.max_tracks:
            self._spawn(image, frame_id)
        self.prev_image = image

    def all_tracks(self) -> list[FeatureTrack]:
        return [t for t in self.tracks.values() if len(t) >= 2]


def _index_tracks(tracks: list[FeatureTrack]):
    """frame_id -> list of (track, observation)."""
    index: dict[int, list] = {}
    for track in tracks:
        for obs in track.observations:
            index.setdefault(obs.frame_id, []).append((track, obs))
    return index


def _frame_ground_plane(cam_points: np.ndarray, cfg: PipelineConfig, frame: int) -> Plane | None:
    below = cam_points[
        (cam_points[:, 1] > cfg.options.ground_prefilter_y)
        & (np.linalg.norm(cam_points, axis=1) < cfg.options.ground_max_range)
    ]
    if len(below) < 50:
        return None
    try:
        return extract_ground_plane(
            below,
            cfg.depth.ground_ransac_threshold,
            iterations=cfg.depth.ground_ransac_iterations,
            min_inlier_ratio=cfg.depth.ground_ransac_min_inlier_ratio,
            seed=cfg.depth.ransac_seed + frame,
        )
    except InsufficientInliers:
        return None


def _is_ground_feature(
    pixel: np.ndarray,
    semantic: SemanticImage | None,
    ground: Plane | None,
    cfg: PipelineConfig,
    intrinsics,
) -> bool:
    if semantic is not None:
        u = int(round(pixel[0]))
        v = int(round(pixel[1]))
        h, w = semantic.labels.shape
        if 0 <= u < w and 0 <= v < h:
            return bool(semantic.ground_mask()[v, u])
    if ground is None:
        return False
    ray = unproject_ray(pixel, intrinsics)
    denom = float(ground.normal @ ray)
    if abs(denom) < 1e-9:
        return False
    t = ground.offset / denom
    if t <= 0:
        return False
    return float(t * ray[2]) <= cfg.depth.max_depth


def run_pipeline(
    sequence: DatasetSequence, config: PipelineConfig, mode: str = "full"
) -> PipelineResult:
    """Process a sequence and return per-frame poses plus diagnostics.

    Any module error aborts with the offending frame id attached.
    """
    if mode not in ("full", "prior_only"):
        raise ValueError(f"unknown mode {mode!r}")
    intrinsics = sequence.intrinsics

    live = None
    if sequence.tracks is not None:
        tracks = sequence.tracks
        track_index = _index_tracks(tracks)
    else:
        if sequence.image_fn is None:
            raise ValueError("sequence provides neither tracks nor images")
        live = LiveTracker(config.tracker, config.options.max_features_per_frame)
        tracks = []
        track_index = {}

    selector = KeyframeSelector(config.window)
    keyframes: list[Keyframe] = []
    diagnostics: list[WindowDiagnostics] = []
    # per frame: (anchor keyframe index or None, motion relative to anchor)
    anchored: list[tuple[int | None, Pose]] = []

    pose_prev = Pose.identity()
    motion_prev = Pose.identity()
    semantic_cache: SemanticImage | None = None

    for frame in range(sequence.n_frames):
        try:
            if live is not None:
                image = sequence.image(frame)
                live.process(frame, image)
                tracks = live.all_tracks()
                track_index = _index_tracks(list(live.tracks.values()))

            cloud = sequence.cloud(frame)
            projected = project_cloud(cloud, sequence.extrinsics, intrinsics)
            cam_points = projected.xyz_camera
            ground = _frame_ground_plane(cam_points, config, frame)
            semantic_cache = (
                sequence.semantic(frame) if config.options.use_semantics else None
            )

            # depth for this frame's feature observations
            observations = track_index.get(frame, [])
            if config.options.max_features_per_frame and len(observations) > config.options.max_features_per_frame:
                idx = np.linspace(0, len(observations) - 1, config.options.max_features_per_frame).astype(int)
                observations = [observations[i] for i in idx]
            for track, obs in observations:
                is_ground = _is_ground_feature(
                    obs.pixel, semantic_cache, ground, config, intrinsics
                )
                obs.depth = estimate_depth(
                    obs.pixel, is_ground, projected, ground, config.depth, intrinsics
                )

            if frame == 0:
                pose = Pose.identity()
                pose_prev = pose
                if mode == "full":
                    keyframes.append(
                        Keyframe(
                            frame_id=0,
                            timestamp=float(sequence.timestamps[0]),
                            pose=pose,
                            category=FrameClass.REQUIRED,
                            track_ids=frozenset(t.track_id for t, _ in observations),
                        )
                    )
                    selector.last_keyframe_time = float(sequence.timestamps[0])
                    anchored.append((0, Pose.identity()))
                else:
                    anchored.append((None, pose))
                continue

            # matches spanning (frame-1, frame)
            matches = []
            for track, obs in observations:
                prev_obs = track.observation_at(frame - 1)
                if prev_obs is None:
                    continue
                if track.semantic_label.value == "dynamic":
                    continue
                depth_prev = None
                if prev_obs.depth is not None and getattr(prev_obs.depth, "valid", False):
                    d = float(prev_obs.depth.depth)
                    if 0.0 < d <= config.depth.max_depth:
                        depth_prev = d
                matches.append(Match(obs.pixel, prev_obs.pixel, depth_prev))
            try:
                match_set = FrameMatchSet(matches, intrinsics, max_depth=config.depth.max_depth)
                motion = estimate_prior(match_set, init=motion_prev, cfg=config.prior)
                mean_flow = match_set.mean_flow()
            except (Underconstrained, ValueError):
                logger.debug("frame %d: prior underconstrained, coasting", frame)
                motion = motion_prev
                mean_flow = 0.0
            motion_prev = motion
            pose = motion.compose(pose_prev)
            pose_prev = pose

            if mode == "prior_only":
                anchored.append((None, pose))
                continue

            frame_class = classify_frame(motion, mean_flow, config.window)
            is_keyframe = selector.decide(float(sequence.timestamps[frame]), frame_class)
            if not is_keyframe:
                if keyframes:
                    anchor = len(keyframes) - 1
                    rel = pose.compose(keyframes[-1].pose.inverse())
                    anchored.append((anchor, rel))
                else:
                    anchored.append((None, pose))
                continue

            # label tracks with the newest semantic image before selection
            if semantic_cache is not None:
                for track, obs in observations:
                    semantic_filter(track, semantic_cache, config.tracker.erosion_kernel)

            keyframes.append(
                Keyframe(
                    frame_id=frame,
                    timestamp=float(sequence.timestamps[frame]),
                    pose=pose,
                    category=frame_class,
                    track_ids=frozenset(t.track_id for t, _ in observations),
                )
            )
            anchored.append((len(keyframes) - 1, Pose.identity()))

            if len(keyframes) >= 2:
                newest_first = [kf.track_ids for kf in reversed(keyframes)]
                n = max(window_length(newest_first, config.window), 2)
                window = keyframes[-n:]
                window_ids = {kf.frame_id for kf in window}
                poses_map = {kf.frame_id: kf.pose for kf in window}
                candidates = [
                    t
                    for t in tracks
                    if sum(1 for o in t.observations if o.frame_id in window_ids) >= 2
                ]
                landmarks = select_landmarks(
                    candidates,
                    poses_map,
                    config.window,
                    intrinsics,
                    seed=config.options.seed + frame,
                )
                if landmarks:
                    try:
                        new_poses, _, diag = build_and_solve_window(
                            window, landmarks, config.window, config.trim, intrinsics
                        )
                        diagnostics.append(diag)
                        for kf in window:
                            kf.pose = new_poses[kf.frame_id]
                        pose = keyframes[-1].pose
                        pose_prev = pose
                    except EmptyProblem:
                        logger.warning("frame %d: window problem emptied by trimming", frame)
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(frame, f"{type(exc).__name__}: {exc}") from exc

    trajectory = []
    for anchor, rel in anchored:
        if anchor is None:
            trajectory.append(rel)
        else:
            trajectory.append(rel.compose(keyframes[anchor].pose))

    report = None
    if sequence.ground_truth is not None:
        try:
            report = kitti_metric(
                trajectory,
                sequence.ground_truth,
                step=config.options.report_step,
                timestamps=sequence.timestamps,
            )
        except TooShort:
            logger.info("sequence too short for the KITTI metric")
    return PipelineResult(
        trajectory=trajectory,
        keyframe_ids=[kf.frame_id for kf in keyframes],
        diagnostics=diagnostics,
        report=report,
        tracks=list(tracks),
    )
