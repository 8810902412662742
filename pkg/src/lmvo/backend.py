"""Keyframe selection, landmark selection, and windowed bundle adjustment.

Keyframes are classified (required / rejected / sparsifiable) from the
frame-to-frame motion and mean optical flow, then admitted on a fixed time
interval. Landmarks are triangulated late, cheirality-checked, binned by
distance, sparsified with a voxel filter, and selected per bin: nearest by
optical flow, middle at random, far by track length. The window problem joins
reprojection and depth residuals with a scale regularizer on the oldest
relative motion and is solved by trimmed robust least squares.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, DegenerateGeometry, Pose, triangulate_linear
from .residuals import DepthSet, ReprojectionSet, ScaleRegularizerSet
from .solver import Problem, RobustLoss, TrimConfig, TrimSummary, solve_trimmed
from .tracking import FeatureTrack, SemanticLabel

logger = logging.getLogger("lmvo.backend")


class FrameClass(enum.Enum):
    REQUIRED = "required"
    REJECTED = "rejected"
    SPARSIFIABLE = "sparsifiable"


class LandmarkBin(enum.Enum):
    NEAR = "near"
    MIDDLE = "middle"
    FAR = "far"


@dataclass
class Keyframe:
    frame_id: int
    timestamp: float
    pose: Pose  # camera-from-world
    category: FrameClass
    track_ids: frozenset = frozenset()


@dataclass
class LandmarkObservation:
    frame_id: int
    pixel: np.ndarray
    depth: float | None = None  # valid Block S estimate, if any


@dataclass
class Landmark:
    track_id: int
    position: np.ndarray  # world
    bin: LandmarkBin
    weight: float
    observations: list[LandmarkObservation]
    flow: float = 0.0
    track_length: int = 0


@dataclass
class WindowConfig:
    keyframe_interval: float = 0.3      # seconds
    turn_angle_threshold: float = 0.015  # rad per frame
    min_mean_flow: float = 2.0           # pixels
    min_connectivity: int = 10           # shared landmarks with newest
    window_min: int = 4
    window_max: int = 10
    bin_near: float = 30.0               # meters; near/middle boundary
    bin_far: float = 80.0                # middle/far boundary
    quota_near: int = 100
    quota_middle: int = 100
    quota_far: int = 100
    voxel_near: float = 0.5
    voxel_middle: float = 2.0
    vegetation_weight: float = 0.9
    w_scale: float = 1.0
    w_reprojection: float = 1.0
    w_depth: float = 5.0
    reprojection_loss_scale: float = 1.0  # pixels
    depth_loss_scale: float = 0.3         # meters
    rescale_weights: bool = True
    scale_regularizer_squared: bool = True
    selection_seed: int = 0

    def __post_init__(self):
        if self.window_min > self.window_max:
            raise ValueError("window_min must not exceed window_max")
        if not (0.0 < self.bin_near < self.bin_far):
            raise ValueError("bin boundaries must be increasing and positive")
        if not (0.0 < self.vegetation_weight <= 1.0):
            raise ValueError("vegetation weight must be in (0, 1]")


# ----------------------------------------------------------- keyframe choice


def classify_frame(prior_motion: Pose, mean_flow: float, cfg: WindowConfig) -> FrameClass:
    """Standstills are rejected, turns are required, the rest may be thinned."""
    if mean_flow < cfg.min_mean_flow:
        return FrameClass.REJECTED
    if prior_motion.rotation_angle() >= cfg.turn_angle_threshold:
        return FrameClass.REQUIRED
    return FrameClass.SPARSIFIABLE


class KeyframeSelector:
    """Stateful time-interval gate over classified frames."""

    def __init__(self, cfg: WindowConfig):
        self.cfg = cfg
        self.last_keyframe_time: float | None = None

    def decide(self, timestamp: float, frame_class: FrameClass) -> bool:
        if frame_class is FrameClass.REJECTED:
            return False
        if frame_class is FrameClass.REQUIRED:
            self.last_keyframe_time = timestamp
            return True
        if (
            self.last_keyframe_time is None
            or timestamp - self.last_keyframe_time >= self.cfg.keyframe_interval - 1e-9
        ):
            self.last_keyframe_time = timestamp
            return True
        return False


def select_keyframes(
    classified: list[tuple[int, float, FrameClass]], cfg: WindowConfig
) -> list[int]:
    """Frame ids chosen from a (frame_id, timestamp, class) stream."""
    selector = KeyframeSelector(cfg)
    return [fid for fid, ts, cls in classified if selector.decide(ts, cls)]


def window_length(track_id_sets: list[frozenset], cfg: WindowConfig) -> int:
    """Number of keyframes (newest first) to keep in the optimization window.

    Walks backward from the newest keyframe while each candidate shares at
    least min_connectivity tracks with it; bounded by window_min / window_max.
    """
    available = len(track_id_sets)
    if available == 0:
        raise ValueError("need at least one keyframe")
    newest = track_id_sets[0]
    n = 1
    while n < min(available, cfg.window_max):
        if len(newest & track_id_sets[n]) < cfg.min_connectivity:
            break
        n += 1
    n = max(n, min(cfg.window_min, available))
    return min(n, cfg.window_max)


# --------------------------------------------------------- landmark selection


def _voxel_filter(candidates: list[Landmark], voxel: float) -> list[Landmark]:
    """One landmark per occupied voxel: the one nearest the voxel's
    coordinate-wise median (ties toward the lower track id)."""
    if voxel <= 0 or not candidates:
        return candidates
    cells: dict[tuple, list[Landmark]] = {}
    for lm in candidates:
        key = tuple(np.floor(lm.position / voxel).astype(int))
        cells.setdefault(key, []).append(lm)
    survivors = []
    for members in cells.values():
        if len(members) == 1:
            survivors.append(members[0])
            continue
        positions = np.array([m.position for m in members])
        median = np.median(positions, axis=0)
        dists = np.linalg.norm(positions - median, axis=1)
        best = min(range(len(members)), key=lambda i: (dists[i], members[i].track_id))
        survivors.append(members[best])
    survivors.sort(key=lambda lm: lm.track_id)
    return survivors


def select_landmarks(
    tracks: list[FeatureTrack],
    poses: dict[int, Pose],
    cfg: WindowConfig,
    intrinsics: CameraIntrinsics,
    seed: int | None = None,
) -> list[Landmark]:
    """Triangulate window tracks and pick a bounded, well-spread landmark set.

    poses maps the windowed keyframe ids to their current camera-from-world
    estimates; the largest id is treated as the newest keyframe. Dynamic
    tracks are excluded, triangulations must pass cheirality in every
    observing camera, each bin is voxel-sparsified, and per-bin quotas are
    filled near-by-flow / middle-at-random / far-by-track-length. Vegetation
    landmarks get cfg.vegetation_weight, others weight 1.
    """
    if not poses:
        return []
    newest_id = max(poses)
    newest_pose = poses[newest_id]
    bins: dict[LandmarkBin, list[Landmark]] = {b: [] for b in LandmarkBin}
    for track in tracks:
        if track.semantic_label is SemanticLabel.DYNAMIC:
            continue
        window_obs = [o for o in track.observations if o.frame_id in poses]
        if len(window_obs) < 2:
            continue
        try:
            position = triangulate_linear(
                np.array([o.pixel for o in window_obs]),
                [poses[o.frame_id] for o in window_obs],
                intrinsics,
            )
        except (DegenerateGeometry, np.linalg.LinAlgError):
            continue
        if any(poses[o.frame_id].transform(position)[2] <= 0 for o in window_obs):
            continue
        depth_at_newest = float(newest_pose.transform(position)[2])
        if depth_at_newest <= 0:
            continue
        if depth_at_newest < cfg.bin_near:
            bin_ = LandmarkBin.NEAR
        elif depth_at_newest < cfg.bin_far:
            bin_ = LandmarkBin.MIDDLE
        else:
            bin_ = LandmarkBin.FAR
        flow = 0.0
        if len(window_obs) >= 2:
            flow = float(np.linalg.norm(window_obs[-1].pixel - window_obs[-2].pixel))
        weight = (
            cfg.vegetation_weight
            if track.semantic_label is SemanticLabel.VEGETATION
            else 1.0
        )
        observations = [
            LandmarkObservation(
                o.frame_id,
                o.pixel,
                o.depth.depth if (o.depth is not None and o.depth.valid) else None,
            )
            for o in window_obs
        ]
        bins[bin_].append(
            Landmark(
                track_id=track.track_id,
                position=position,
                bin=bin_,
                weight=weight,
                observations=observations,
                flow=flow,
                track_length=len(track),
            )
        )

    rng = np.random.default_rng(cfg.selection_seed if seed is None else seed)
    selected: list[Landmark] = []

    near = _voxel_filter(bins[LandmarkBin.NEAR], cfg.voxel_near)
    near.sort(key=lambda lm: (-lm.flow, lm.track_id))
    selected.extend(near[: cfg.quota_near])

    middle = _voxel_filter(bins[LandmarkBin.MIDDLE], cfg.voxel_middle)
    if len(middle) > cfg.quota_middle:
        idx = rng.choice(len(middle), size=cfg.quota_middle, replace=False)
        middle = [middle[i] for i in sorted(idx)]
    selected.extend(middle)

    far = sorted(bins[LandmarkBin.FAR], key=lambda lm: (-lm.track_length, lm.track_id))
    selected.extend(far[: cfg.quota_far])
    return selected


# ------------------------------------------------------------- residual ops


def depth_residual(landmark_position: np.ndarray, pose: Pose, measured_depth: float) -> float:
    """Measured depth minus the landmark's camera-frame depth under the pose."""
    return float(measured_depth - pose.transform(landmark_position)[2])


def scale_regularizer(older: Pose, newer: Pose, captured: float, squared: bool = True) -> float:
    """Current relative-translation scale minus its captured value."""
    return ScaleRegularizerSet.relative_scale(older, newer, squared) - captured


# ------------------------------------------------------------ window solving


@dataclass
class WindowDiagnostics:
    keyframe_ids: list[int]
    bin_counts: dict[str, int]
    n_reprojection: int = 0
    n_depth: int = 0
    n_trimmed: int = 0
    removed_landmarks: int = 0
    final_cost: float = 0.0
    iterations: int = 0

    def format(self) -> str:
        bins = " ".join(f"{k}={v}" for k, v in self.bin_counts.items())
        return (
            f"window kfs={self.keyframe_ids} {bins} repr={self.n_reprojection} "
            f"depth={self.n_depth} trimmed={self.n_trimmed} "
            f"dropped_lms={self.removed_landmarks} cost={self.final_cost:.6e} "
            f"iters={self.iterations}"
        )


def _rescale_class_weights(problem: Problem) -> None:
    """Bring initial per-class mean costs within a factor of two of the
    reprojection class by scaling the class weights."""
    values = problem.values()
    means: dict[str, float] = {}
    for rs in problem.residual_sets:
        r = rs.residuals(values)
        s = np.einsum("nd,nd->n", r, r)
        rho, _ = rs.loss.evaluate(s)
        cost = float(np.dot(rs.weights, rho))
        means[rs.tag] = means.get(rs.tag, 0.0) + cost
    counts = {
        tag: sum(rs.n_blocks for rs in problem.residual_sets if rs.tag == tag)
        for tag in means
    }
    means = {tag: means[tag] / counts[tag] for tag in means if counts[tag]}
    ref = means.get("reprojection", 0.0)
    if ref <= 1e-12:
        return
    for rs in problem.residual_sets:
        if rs.tag == "reprojection":
            continue
        mean = means.get(rs.tag, 0.0)
        if mean <= 1e-12:
            continue
        ratio = mean / ref
        if ratio > 2.0:
            rs.weights = rs.weights * (2.0 / ratio)
        elif ratio < 0.5:
            rs.weights = rs.weights * (0.5 / ratio)


def build_and_solve_window(
    keyframes: list[Keyframe],
    landmarks: list[Landmark],
    cfg: WindowConfig,
    trim: TrimConfig,
    intrinsics: CameraIntrinsics,
) -> tuple[dict[int, Pose], dict[int, np.ndarray], WindowDiagnostics]:
    """Assemble and solve the window problem; oldest pose is gauge-fixed.

    Returns updated keyframe poses, updated landmark positions (keyed by
    track id), and per-window diagnostics. Raises EmptyProblem or
    NumericalFailure from the solver.
    """
    if len(keyframes) < 2:
        raise ValueError("window needs at least two keyframes")
    if not landmarks:
        raise ValueError("window needs at least one landmark")
    keyframes = sorted(keyframes, key=lambda kf: kf.frame_id)
    times = [kf.timestamp for kf in keyframes]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError("keyframe timestamps must be strictly increasing")

    problem = Problem()
    for i, kf in enumerate(keyframes):
        problem.add_parameter(
            ("pose", kf.frame_id), kf.pose, manifold="pose", constant=(i == 0)
        )
    for lm in landmarks:
        problem.add_parameter(("lm", lm.track_id), lm.position)

    frame_ids = {kf.frame_id for kf in keyframes}
    repr_pose, repr_lm, repr_meas, repr_weight = [], [], [], []
    depth_pose, depth_lm, depth_meas, depth_weight = [], [], [], []
    for lm in landmarks:
        for obs in lm.observations:
            if obs.frame_id not in frame_ids:
                continue
            repr_pose.append(("pose", obs.frame_id))
            repr_lm.append(("lm", lm.track_id))
            repr_meas.append(obs.pixel)
            repr_weight.append(cfg.w_reprojection * lm.weight)
            if obs.depth is not None:
                depth_pose.append(("pose", obs.frame_id))
                depth_lm.append(("lm", lm.track_id))
                depth_meas.append(obs.depth)
                depth_weight.append(cfg.w_depth * lm.weight)

    problem.add_residual_set(
        ReprojectionSet(
            repr_pose,
            repr_lm,
            np.array(repr_meas),
            intrinsics,
            RobustLoss("cauchy", cfg.reprojection_loss_scale),
            np.array(repr_weight),
            problem.claim_block_ids(len(repr_meas)),
        )
    )
    if depth_meas:
        problem.add_residual_set(
            DepthSet(
                depth_pose,
                depth_lm,
                np.array(depth_meas),
                RobustLoss("cauchy", cfg.depth_loss_scale),
                np.array(depth_weight),
                problem.claim_block_ids(len(depth_meas)),
            )
        )
    oldest, second = keyframes[0], keyframes[1]
    captured = ScaleRegularizerSet.relative_scale(
        oldest.pose, second.pose, cfg.scale_regularizer_squared
    )
    problem.add_residual_set(
        ScaleRegularizerSet(
            ("pose", oldest.frame_id),
            ("pose", second.frame_id),
            captured,
            cfg.w_scale,
            int(problem.claim_block_ids(1)[0]),
            squared=cfg.scale_regularizer_squared,
        )
    )
    if cfg.rescale_weights:
        _rescale_class_weights(problem)

    summary: TrimSummary = solve_trimmed(problem, trim)

    poses = {kf.frame_id: problem.value(("pose", kf.frame_id)) for kf in keyframes}
    positions = {lm.track_id: problem.value(("lm", lm.track_id)) for lm in landmarks}
    removed_lms = sum(1 for key in summary.removed_parameters if key[0] == "lm")
    bin_counts = {b.value: 0 for b in LandmarkBin}
    for lm in landmarks:
        bin_counts[lm.bin.value] += 1
    diag = WindowDiagnostics(
        keyframe_ids=[kf.frame_id for kf in keyframes],
        bin_counts=bin_counts,
        n_reprojection=len(repr_meas),
        n_depth=len(depth_meas),
        n_trimmed=len(summary.removed_block_ids),
        removed_landmarks=removed_lms,
        final_cost=summary.final_cost,
        iterations=summary.iterations,
    )
    logger.debug(diag.format())
    return poses, positions, diag
