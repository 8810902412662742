"""Synthetic bundle-adjustment windows with exact ground truth (test helper)."""

import numpy as np

from lmvo.backend import FrameClass, Keyframe, Landmark, LandmarkBin, LandmarkObservation
from lmvo.geometry import CameraIntrinsics, Pose, project

CAM = CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)


def make_window(
    rng,
    n_keyframes=5,
    n_landmarks=60,
    spacing=1.0,
    depth_fraction=0.3,
    pixel_noise=0.0,
    depth_noise=0.0,
    camera=CAM,
):
    """Camera sliding forward along +z observing a wall-and-ground box.

    Returns (keyframes, landmarks, true_poses, true_positions). Observations
    are exact projections plus optional noise; a fraction of them carry the
    exact (optionally noisy) camera-frame depth.
    """
    true_poses = [
        Pose(np.eye(3), [0.0, 0.0, -spacing * j]) for j in range(n_keyframes)
    ]
    positions = []
    while len(positions) < n_landmarks:
        side = rng.integers(0, 3)
        z = rng.uniform(spacing * n_keyframes + 3.0, spacing * n_keyframes + 24.0)
        if side == 0:
            positions.append([-4.0 + rng.uniform(-0.3, 0.3), rng.uniform(-2, 1.4), z])
        elif side == 1:
            positions.append([4.0 + rng.uniform(-0.3, 0.3), rng.uniform(-2, 1.4), z])
        else:
            positions.append([rng.uniform(-3.5, 3.5), 1.6, z])
    positions = np.array(positions)

    landmarks = []
    track_sets = [set() for _ in range(n_keyframes)]
    for i, point in enumerate(positions):
        observations = []
        for j, pose in enumerate(true_poses):
            cam_point = pose.transform(point)
            if cam_point[2] <= 0.5:
                continue
            pixel = project(cam_point, camera)
            if pixel_noise:
                pixel = pixel + rng.normal(scale=pixel_noise, size=2)
            if not camera.contains(pixel)[0]:
                continue
            depth = None
            if rng.uniform() < depth_fraction and cam_point[2] <= 30.0:
                depth = float(cam_point[2])
                if depth_noise:
                    depth += float(rng.normal(scale=depth_noise))
            observations.append(LandmarkObservation(j, np.asarray(pixel), depth))
            track_sets[j].add(i)
        if len(observations) < 2:
            continue
        depth_newest = float(true_poses[-1].transform(point)[2])
        bin_ = (
            LandmarkBin.NEAR
            if depth_newest < 30
            else LandmarkBin.MIDDLE
            if depth_newest < 80
            else LandmarkBin.FAR
        )
        landmarks.append(
            Landmark(
                track_id=i,
                position=point.copy(),
                bin=bin_,
                weight=1.0,
                observations=observations,
                flow=0.0,
                track_length=len(observations),
            )
        )
    keyframes = [
        Keyframe(
            frame_id=j,
            timestamp=0.3 * j,
            pose=true_poses[j],
            category=FrameClass.SPARSIFIABLE,
            track_ids=frozenset(track_sets[j]),
        )
        for j in range(n_keyframes)
    ]
    return keyframes, landmarks, true_poses, positions


def perturb_window(rng, keyframes, landmarks, pose_sigma_t=0.05, pose_sigma_r=np.radians(0.5), lm_sigma=0.02):
    """Perturb all but the oldest pose, and all landmark positions."""
    out_kfs = [keyframes[0]]
    for kf in keyframes[1:]:
        delta = np.concatenate(
            [rng.normal(scale=pose_sigma_r, size=3), rng.normal(scale=pose_sigma_t, size=3)]
        )
        out_kfs.append(
            Keyframe(kf.frame_id, kf.timestamp, kf.pose.plus(delta), kf.category, kf.track_ids)
        )
    out_lms = []
    for lm in landmarks:
        out_lms.append(
            Landmark(
                lm.track_id,
                lm.position + rng.normal(scale=lm_sigma, size=3),
                lm.bin,
                lm.weight,
                lm.observations,
                lm.flow,
                lm.track_length,
            )
        )
    return out_kfs, out_lms


def scale_window(keyframes, landmarks, factor):
    """Consistent monocular rescaling: reprojections are unchanged."""
    out_kfs = [
        Keyframe(
            kf.frame_id,
            kf.timestamp,
            Pose(kf.pose.rotation, kf.pose.translation * factor),
            kf.category,
            kf.track_ids,
        )
        for kf in keyframes
    ]
    out_lms = [
        Landmark(
            lm.track_id,
            lm.position * factor,
            lm.bin,
            lm.weight,
            lm.observations,
            lm.flow,
            lm.track_length,
        )
        for lm in landmarks
    ]
    return out_kfs, out_lms


def pose_errors(poses: dict, true_poses) -> tuple[float, float]:
    """(max translation error, max rotation error in radians) over a window."""
    t_err, r_err = 0.0, 0.0
    for j, truth in enumerate(true_poses):
        est = poses[j]
        t_err = max(t_err, float(np.linalg.norm(est.translation - truth.translation)))
        r_err = max(r_err, est.compose(truth.inverse()).rotation_angle())
    return t_err, r_err
