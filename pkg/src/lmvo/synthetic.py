"""Synthetic driving scenes with exact ground truth.

The world is a corridor of flat wall panels along a parametric trajectory
(straight and arc segments) over an infinite ground plane. Everything a real
sequence provides is generated consistently from the same geometry: LIDAR
sweeps by ray casting, feature tracks as (optionally noisy) projections of
surface points, semantic label images, ground-truth poses, and optional
procedurally textured grayscale images.

World frame = first camera frame: x right, y down, z forward; the ground
plane is y = camera_height. LIDAR beams are specified by elevation from the
downward vertical (nadir), so a beam at elevation e hits flat ground at
forward distance height * tan(e).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import DatasetSequence
from .geometry import CameraIntrinsics, ExtrinsicCalibration, Pose, project_many
from .tracking import ClassTable, FeatureTrack, SemanticImage

BUILDING, ROAD, VEGETATION, CAR, SKY = 2, 0, 8, 13, 10

# LIDAR axes (x forward, y left, z up) expressed in camera axes
LIDAR_TO_CAMERA_ROTATION = np.array(
    [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]]
)


@dataclass
class SceneConfig:
    """Geometry, sensor, and noise model of a generated scene."""

    segments: tuple = (("straight", 60.0), ("turn", 90.0, 15.0), ("straight", 60.0))
    speed: float = 7.0                 # m/s
    frame_rate: float = 10.0           # Hz
    camera_height: float = 1.7         # m above ground
    corridor_half_width: float = 8.0
    wall_top: float = -2.5             # wall extent in y (down-positive)
    wall_bottom: float = 1.7
    panel_length: float = 6.0
    lookahead: float = 45.0            # extra geometry past the path end
    wall_feature_spacing: float = 2.0
    wall_feature_rows: int = 4
    ground_feature_spacing: float = 3.0
    ground_feature_offsets: tuple = (-4.0, -1.5, 1.5, 4.0)
    feature_jitter: float = 0.25
    n_beams: int = 48
    elevation_start_deg: float = 55.0  # from nadir
    elevation_step_deg: float = 0.8
    azimuth_fov_deg: float = 100.0
    azimuth_step_deg: float = 0.25
    max_range: float = 80.0
    lidar_offset: tuple = (0.0, -0.2, 0.08)  # lidar origin in camera frame
    pixel_noise: float = 0.0
    range_noise: float = 0.0
    dynamic_fraction: float = 0.0
    vegetation_fraction: float = 0.0
    semantics: bool = False
    semantic_subsample: int = 4
    render_images: bool = False
    fx: float = 500.0
    fy: float = 500.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480

    def camera(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height)

    def extrinsics(self) -> ExtrinsicCalibration:
        return ExtrinsicCalibration(
            Pose(LIDAR_TO_CAMERA_ROTATION, np.asarray(self.lidar_offset, dtype=float))
        )

    def beam_elevations(self) -> np.ndarray:
        return np.radians(
            self.elevation_start_deg
            + self.elevation_step_deg * np.arange(self.n_beams)
        )

    def azimuths(self) -> np.ndarray:
        half = np.radians(self.azimuth_fov_deg / 2.0)
        step = np.radians(self.azimuth_step_deg)
        return np.arange(-half, half + 1e-12, step)


def ground_beam_depths(height: float, elevations: np.ndarray) -> np.ndarray:
    """Closed-form forward distance of ground returns per beam elevation."""
    return height * np.tan(np.asarray(elevations, dtype=float))


def _forward(theta: float) -> np.ndarray:
    return np.array([np.sin(theta), 0.0, np.cos(theta)])


def _perp(theta: float) -> np.ndarray:
    return np.array([np.cos(theta), 0.0, -np.sin(theta)])


def _integrate_path(segments, ds: float):
    """Polyline samples (position, heading) spaced ds along the path."""
    points = [(np.zeros(3), 0.0)]
    theta = 0.0
    position = np.zeros(3)
    for segment in segments:
        if segment[0] == "straight":
            length = float(segment[1])
            steps = max(1, int(round(length / ds)))
            for _ in range(steps):
                position = position + ds * _forward(theta)
                points.append((position.copy(), theta))
        elif segment[0] == "turn":
            angle = np.radians(float(segment[1]))
            radius = float(segment[2])
            arc = abs(angle) * radius
            steps = max(1, int(round(arc / ds)))
            dtheta = angle / steps
            for _ in range(steps):
                theta += dtheta
                position = position + ds * _forward(theta)
                points.append((position.copy(), theta))
        else:
            raise ValueError(f"unknown segment kind {segment[0]!r}")
    return points


@dataclass
class Panel:
    """Finite rectangle: origin + a*e1 + b*e2 with a, b in [0, 1]."""

    origin: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    label: int

    def __post_init__(self):
        self.normal = np.cross(self.e1, self.e2)
        self.normal /= np.linalg.norm(self.normal)
        self.inv_e1 = self.e1 / float(np.dot(self.e1, self.e1))
        self.inv_e2 = self.e2 / float(np.dot(self.e2, self.e2))


class Raycaster:
    """Nearest-hit queries against the panels and the ground plane."""

    def __init__(self, panels: list[Panel], ground_y: float, max_range: float):
        self.panels = panels
        self.ground_y = ground_y
        self.max_range = max_range
        self.origins = np.array([p.origin for p in panels]).reshape(-1, 3)
        self.normals = np.array([p.normal for p in panels]).reshape(-1, 3)
        self.inv_e1 = np.array([p.inv_e1 for p in panels]).reshape(-1, 3)
        self.inv_e2 = np.array([p.inv_e2 for p in panels]).reshape(-1, 3)
        self.labels = np.array([p.label for p in panels], dtype=int)
        self.reach = max_range + np.array(
            [np.linalg.norm(p.e1) + np.linalg.norm(p.e2) for p in panels]
        )

    def cast(self, origin: np.ndarray, directions: np.ndarray):
        """(t, label) of the nearest hit per unit ray; t = inf where none.

        Hit coordinates inside each panel are expanded as linear functions of
        t so the whole query reduces to three (rays x panels) matmuls plus
        elementwise masks; no (rays, panels, 3) temporaries.
        """
        directions = np.asarray(directions, dtype=float).reshape(-1, 3)
        n_rays = len(directions)
        best_t = np.full(n_rays, np.inf)
        best_label = np.full(n_rays, SKY, dtype=int)
        rel_all = self.origins - origin
        near = np.linalg.norm(rel_all, axis=1) <= self.reach
        if near.any():
            rel = rel_all[near]                               # (panels, 3)
            normals = self.normals[near]
            inv_e1, inv_e2 = self.inv_e1[near], self.inv_e2[near]
            labels_near = self.labels[near]
            denom = directions @ normals.T                    # (rays, panels)
            offset = np.einsum("pj,pj->p", rel, normals)
            a0 = -np.einsum("pj,pj->p", rel, inv_e1)
            a1 = directions @ inv_e1.T
            b0 = -np.einsum("pj,pj->p", rel, inv_e2)
            b1 = directions @ inv_e2.T
            with np.errstate(divide="ignore", invalid="ignore"):
                # a = (origin + t d - panel_origin) . inv_e1, linear in t
                t = offset[None, :] / denom
                a = a0[None, :] + t * a1
                b = b0[None, :] + t * b1
                valid = (
                    (t > 0.1)
                    & (t <= self.max_range)
                    & (a >= 0.0) & (a <= 1.0)
                    & (b >= 0.0) & (b <= 1.0)
                )
            t = np.where(valid, t, np.inf)
            idx = np.argmin(t, axis=1)
            best_t = t[np.arange(n_rays), idx]
            best_label = np.where(np.isfinite(best_t), labels_near[idx], SKY)
        dy = directions[:, 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            t_ground = (self.ground_y - origin[1]) / dy
        ground_ok = (dy > 1e-12) & (t_ground > 0.1) & (t_ground <= self.max_range)
        closer = ground_ok & (t_ground < best_t)
        best_t = np.where(closer, t_ground, best_t)
        best_label = np.where(closer, ROAD, best_label)
        return best_t, best_label


@dataclass
class DynamicObject:
    spawn: np.ndarray
    velocity: np.ndarray
    corners: np.ndarray  # (4, 3) offsets from the center

    def points_at(self, t: float) -> np.ndarray:
        return self.spawn + self.velocity * t + self.corners


@dataclass
class GeneratedScene:
    sequence: DatasetSequence
    config: SceneConfig
    path_length: float
    dynamic_track_ids: frozenset
    raycaster: Raycaster
    feature_points: np.ndarray
    feature_labels: np.ndarray

    def cast_sweep(self, frame: int):
        """(points_lidar, elevations, azimuths, labels) of one noiseless sweep."""
        return _lidar_sweep(
            self.config,
            self.raycaster,
            self.sequence.ground_truth[frame],
            rng=None,
        )


def _lidar_sweep(cfg: SceneConfig, caster: Raycaster, cam_pose: Pose, rng):
    """One sweep in the LIDAR frame; beams x azimuths, range-noised if rng."""
    elevations = cfg.beam_elevations()
    azimuths = cfg.azimuths()
    elev_grid, azim_grid = np.meshgrid(elevations, azimuths, indexing="ij")
    elev = elev_grid.ravel()
    azim = azim_grid.ravel()
    # lidar frame: x forward, y left, z up; elevation from nadir
    dirs_lidar = np.column_stack(
        [np.sin(elev) * np.cos(azim), np.sin(elev) * np.sin(azim), -np.cos(elev)]
    )
    lidar_from_world = cfg.extrinsics().lidar_to_camera.inverse().compose(cam_pose)
    world_from_lidar = lidar_from_world.inverse()
    origin = world_from_lidar.translation
    dirs_world = dirs_lidar @ world_from_lidar.rotation.T
    t, labels = caster.cast(origin, dirs_world)
    valid = np.isfinite(t)
    t = t[valid]
    if rng is not None and cfg.range_noise > 0:
        t = t + rng.normal(scale=cfg.range_noise, size=len(t))
    hits_world = origin + t[:, None] * dirs_world[valid]
    points_lidar = lidar_from_world.transform(hits_world)
    return points_lidar, elev[valid], azim[valid], labels[valid]


def _build_panels(cfg: SceneConfig, rng) -> tuple[list[Panel], np.ndarray, np.ndarray]:
    """Corridor walls along the path plus feature points on them and the
    ground. Returns (panels, feature_points, feature_labels)."""
    path = _integrate_path(cfg.segments, ds=cfg.panel_length)
    # extend the geometry beyond the path end so the camera always sees walls
    end_pos, end_theta = path[-1]
    extra = int(np.ceil(cfg.lookahead / cfg.panel_length))
    extended = list(path)
    position, theta = end_pos.copy(), end_theta
    for _ in range(extra):
        position = position + cfg.panel_length * _forward(theta)
        extended.append((position.copy(), theta))

    panels: list[Panel] = []
    features: list[np.ndarray] = []
    labels: list[int] = []
    wall_span = cfg.wall_bottom - cfg.wall_top
    for (p0, th0), (p1, th1) in zip(extended, extended[1:]):
        for side in (-1.0, 1.0):
            a = p0 + side * cfg.corridor_half_width * _perp(th0)
            b = p1 + side * cfg.corridor_half_width * _perp(th1)
            origin = a + np.array([0.0, cfg.wall_top, 0.0])
            e1 = b - a
            e2 = np.array([0.0, wall_span, 0.0])
            label = VEGETATION if rng.uniform() < cfg.vegetation_fraction else BUILDING
            panels.append(Panel(origin, e1, e2, label))
            # feature grid on the panel, jittered
            n_cols = max(1, int(np.linalg.norm(e1) / cfg.wall_feature_spacing))
            for col in range(n_cols):
                for row in range(cfg.wall_feature_rows):
                    fa = (col + 0.5) / n_cols + rng.uniform(-0.3, 0.3) / n_cols
                    fb = (row + 0.5) / cfg.wall_feature_rows + rng.uniform(-0.2, 0.2) / cfg.wall_feature_rows
                    fa, fb = np.clip(fa, 0.0, 1.0), np.clip(fb, 0.0, 1.0)
                    features.append(origin + fa * e1 + fb * e2)
                    labels.append(label)
    # ground features along the path
    for (p0, th0) in extended:
        for offset in cfg.ground_feature_offsets:
            jitter = rng.uniform(-cfg.feature_jitter, cfg.feature_jitter, size=2)
            point = (
                p0
                + (offset + jitter[0]) * _perp(th0)
                + jitter[1] * _forward(th0)
            )
            point[1] = cfg.camera_height
            features.append(point)
            labels.append(ROAD)
    return panels, np.array(features), np.array(labels, dtype=int)


def _make_dynamic_objects(cfg: SceneConfig, rng, path, n_static: int) -> list[DynamicObject]:
    if cfg.dynamic_fraction <= 0:
        return []
    n_objects = max(1, int(np.ceil(cfg.dynamic_fraction * n_static / 4.0)))
    objects = []
    for _ in range(n_objects):
        i = rng.integers(2, max(3, len(path) - 2))
        pos, theta = path[i]
        lateral = rng.uniform(-3.0, 3.0)
        center = pos + lateral * _perp(theta) + np.array([0.0, 0.9, 0.0])
        speed = rng.uniform(2.0, 6.0) * rng.choice([-1.0, 1.0])
        velocity = speed * _forward(theta)
        w, h = 1.0, 0.5
        corners = np.array(
            [[-w, -h, 0.0], [w, -h, 0.0], [w, h, 0.0], [-w, h, 0.0]]
        ) + rng.uniform(-0.1, 0.1, size=(4, 3))
        objects.append(DynamicObject(center, velocity, corners))
    return objects


def _texture(points: np.ndarray) -> np.ndarray:
    """Procedural grayscale with corner-rich structure, from world positions."""
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    v = (
        np.sin(2.1 * x + 0.7) * np.cos(1.7 * z + 1.3)
        + 0.8 * np.sin(4.3 * x - 2.2 * z) * np.cos(3.1 * y + 0.4)
        + 0.6 * np.sin(8.9 * x + 5.1 * y - 3.7 * z)
        + 0.4 * np.sin(17.0 * z + 9.0 * x)
    )
    return 128.0 + 45.0 * v


def _render_frame(cfg, caster, cam_pose, pixel_rays_world_fn, want_labels):
    """Subsampled ray cast upsampled to full resolution.

    Returns (labels or None, image or None) for one frame.
    """
    sub = cfg.semantic_subsample
    us = np.arange(0, cfg.width, sub) + 0.5 * (sub - 1)
    vs = np.arange(0, cfg.height, sub) + 0.5 * (sub - 1)
    uu, vv = np.meshgrid(us, vs)
    dirs_world, origin = pixel_rays_world_fn(uu.ravel(), vv.ravel())
    t, labels = caster.cast(origin, dirs_world)
    shape = (len(vs), len(us))
    label_grid = labels.reshape(shape)
    full_labels = None
    if want_labels:
        full_labels = np.kron(label_grid, np.ones((sub, sub), dtype=int))
        full_labels = full_labels[: cfg.height, : cfg.width].astype(np.uint8)
    image = None
    if cfg.render_images:
        t_safe = np.where(np.isfinite(t), t, cfg.max_range)
        hits = origin + t_safe[:, None] * dirs_world
        # upsample hit positions, then evaluate the texture at full resolution
        hx = np.kron(hits[:, 0].reshape(shape), np.ones((sub, sub)))
        hy = np.kron(hits[:, 1].reshape(shape), np.ones((sub, sub)))
        hz = np.kron(hits[:, 2].reshape(shape), np.ones((sub, sub)))
        pts = np.column_stack(
            [hx[: cfg.height, : cfg.width].ravel(),
             hy[: cfg.height, : cfg.width].ravel(),
             hz[: cfg.height, : cfg.width].ravel()]
        )
        image = _texture(pts).reshape(cfg.height, cfg.width)
        sky = np.kron(label_grid == SKY, np.ones((sub, sub), dtype=bool))
        image[sky[: cfg.height, : cfg.width]] = 210.0
    return full_labels, image


def generate_scene(cfg: SceneConfig, seed: int = 0, n_frames: int | None = None) -> GeneratedScene:
    """Deterministic scene generation; identical (cfg, seed) gives identical
    output, including noise."""
    rng = np.random.default_rng(seed)
    camera = cfg.camera()
    ds = cfg.speed / cfg.frame_rate
    frame_path = _integrate_path(cfg.segments, ds=ds)
    if n_frames is not None:
        frame_path = frame_path[:n_frames]
    poses = []
    for position, theta in frame_path:
        world_from_cam = np.array(
            [
                [np.cos(theta), 0.0, np.sin(theta)],
                [0.0, 1.0, 0.0],
                [-np.sin(theta), 0.0, np.cos(theta)],
            ]
        )
        poses.append(Pose(world_from_cam.T, -world_from_cam.T @ position))
    timestamps = np.arange(len(poses)) / cfg.frame_rate

    geometry_rng = np.random.default_rng(seed + 1)
    panels, feature_points, feature_labels = _build_panels(cfg, geometry_rng)
    caster = Raycaster(panels, cfg.camera_height, cfg.max_range)
    panel_path = _integrate_path(cfg.segments, ds=cfg.panel_length)
    objects = _make_dynamic_objects(cfg, geometry_rng, panel_path, len(feature_points))

    # ---------------------------------------------------------- feature tracks
    tracks: dict[int, FeatureTrack] = {}
    noise_rng = np.random.default_rng(seed + 2)
    dynamic_base = len(feature_points)
    blob_boxes: list[list[tuple]] = []
    for frame, pose in enumerate(poses):
        cam_points = pose.transform(feature_points)
        in_front = (cam_points[:, 2] > 1.5) & (cam_points[:, 2] < 100.0)
        candidates = np.nonzero(in_front)[0]
        pixels = project_many(cam_points[candidates], camera)
        inside = camera.contains(pixels)
        candidates = candidates[inside]
        pixels = pixels[inside]
        # occlusion: the point itself must be the nearest scene hit on its ray
        center = pose.inverse().translation
        delta = feature_points[candidates] - center
        distances = np.linalg.norm(delta, axis=1)
        t_hit, _ = caster.cast(center, delta / distances[:, None])
        visible = t_hit > distances - 0.4
        candidates = candidates[visible]
        pixels = pixels[visible]
        if cfg.pixel_noise > 0:
            pixels = pixels + noise_rng.normal(scale=cfg.pixel_noise, size=pixels.shape)
            inside = camera.contains(pixels)
            candidates = candidates[inside]
            pixels = pixels[inside]
        for idx, pixel in zip(candidates, pixels):
            track = tracks.setdefault(int(idx), FeatureTrack(int(idx)))
            track.add(frame, pixel)
        # dynamic objects
        boxes = []
        for obj_i, obj in enumerate(objects):
            obj_points = obj.points_at(timestamps[frame])
            cam_obj = pose.transform(obj_points)
            if np.any(cam_obj[:, 2] < 2.0) or np.any(cam_obj[:, 2] > 60.0):
                blob = None
            else:
                obj_pixels = project_many(cam_obj, camera)
                if cfg.pixel_noise > 0:
                    obj_pixels = obj_pixels + noise_rng.normal(
                        scale=cfg.pixel_noise, size=obj_pixels.shape
                    )
                inside = camera.contains(obj_pixels)
                if inside.all():
                    for corner_i, pixel in enumerate(obj_pixels):
                        tid = dynamic_base + 4 * obj_i + corner_i
                        track = tracks.setdefault(tid, FeatureTrack(tid))
                        track.add(frame, pixel)
                    pad = 16.0
                    blob = (
                        float(obj_pixels[:, 0].min() - pad),
                        float(obj_pixels[:, 0].max() + pad),
                        float(obj_pixels[:, 1].min() - pad),
                        float(obj_pixels[:, 1].max() + pad),
                    )
                else:
                    blob = None
            if blob is not None:
                boxes.append(blob)
        blob_boxes.append(boxes)

    track_list = [tracks[k] for k in sorted(tracks) if len(tracks[k]) >= 2]
    dynamic_ids = frozenset(
        tid for tid in tracks if tid >= dynamic_base and len(tracks[tid]) >= 2
    )

    # ------------------------------------------------------------- sweep cache
    sweep_rng_seed = seed + 3
    from functools import lru_cache

    @lru_cache(maxsize=None)
    def cloud_fn(i: int) -> np.ndarray:
        sweep_rng = np.random.default_rng(sweep_rng_seed + 1000 * i)
        points, _, _, _ = _lidar_sweep(cfg, caster, poses[i], sweep_rng)
        return points

    def pixel_rays_for(pose):
        world_from_cam = pose.inverse()

        def fn(us, vs):
            rays_cam = np.column_stack(
                [
                    (us - camera.cx) / camera.fx,
                    (vs - camera.cy) / camera.fy,
                    np.ones(len(us)),
                ]
            )
            rays_cam /= np.linalg.norm(rays_cam, axis=1, keepdims=True)
            return rays_cam @ world_from_cam.rotation.T, world_from_cam.translation

        return fn

    semantic_fn = None
    if cfg.semantics:
        table = ClassTable()

        def semantic_fn(i: int) -> SemanticImage:
            labels, _ = _render_frame(
                cfg, caster, poses[i], pixel_rays_for(poses[i]), want_labels=True
            )
            for (u0, u1, v0, v1) in blob_boxes[i]:
                iu0, iu1 = int(max(0, u0)), int(min(cfg.width, u1))
                iv0, iv1 = int(max(0, v0)), int(min(cfg.height, v1))
                labels[iv0:iv1, iu0:iu1] = CAR
            return SemanticImage(labels, table)

    image_fn = None
    if cfg.render_images:

        def image_fn(i: int) -> np.ndarray:
            _, image = _render_frame(
                cfg, caster, poses[i], pixel_rays_for(poses[i]), want_labels=False
            )
            return image

    centers = np.array([p.inverse().translation for p in poses])
    path_length = float(np.sum(np.linalg.norm(np.diff(centers, axis=0), axis=1)))

    sequence = DatasetSequence(
        intrinsics=camera,
        extrinsics=cfg.extrinsics(),
        timestamps=timestamps,
        cloud_fn=cloud_fn,
        image_fn=image_fn,
        semantic_fn=semantic_fn,
        ground_truth=poses,
        tracks=track_list,
        name=f"synthetic-{seed}",
    )
    return GeneratedScene(
        sequence=sequence,
        config=cfg,
        path_length=path_length,
        dynamic_track_ids=dynamic_ids,
        raycaster=caster,
        feature_points=feature_points,
        feature_labels=feature_labels,
    )
