"""Batched residual sets for motion estimation and bundle adjustment.

Each set evaluates all its blocks in one vectorized pass and provides analytic
Jacobians with respect to the local parameter increments (rotation increments
are left-multiplied, translations additive; see Pose.plus).

Camera-frame depths are clamped to a small positive value during evaluation so
that an uphill trial step cannot crash the solver; the exploding residual gets
the step rejected instead.
"""

from __future__ import annotations

import numpy as np

from .geometry import CameraIntrinsics, Pose, skew
from .solver import ResidualSet, RobustLoss, _as_key_array

_DEPTH_CLAMP = 1e-6


def _skew_batch(v: np.ndarray) -> np.ndarray:
    n = len(v)
    out = np.zeros((n, 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


def _gather(values, unique_keys, inverse):
    stacked = [values[k] for k in unique_keys]
    return stacked, inverse


class _PoseLandmarkSet(ResidualSet):
    """Shared machinery for sets indexed by (pose, landmark) pairs."""

    def __init__(self, pose_keys, landmark_keys, weights, block_ids, loss, intrinsics):
        self.pose_keys = _as_key_array(pose_keys)
        self.landmark_keys = _as_key_array(landmark_keys)
        self.weights = np.asarray(weights, dtype=float)
        self.block_ids = np.asarray(block_ids, dtype=int)
        self.loss = loss
        self.intrinsics = intrinsics
        self._index()

    def _index(self):
        self._pose_unique = list(dict.fromkeys(self.pose_keys.tolist()))
        pose_pos = {k: i for i, k in enumerate(self._pose_unique)}
        self._pose_inv = np.array([pose_pos[k] for k in self.pose_keys], dtype=int)
        self._lm_unique = list(dict.fromkeys(self.landmark_keys.tolist()))
        lm_pos = {k: i for i, k in enumerate(self._lm_unique)}
        self._lm_inv = np.array([lm_pos[k] for k in self.landmark_keys], dtype=int)

    def slot_keys(self):
        return [self.pose_keys, self.landmark_keys]

    def _transformed(self, values):
        """Rotated landmark v = R l and camera point y = v + t per block."""
        rot = np.stack([values[k].rotation for k in self._pose_unique])[self._pose_inv]
        trans = np.stack([values[k].translation for k in self._pose_unique])[
            self._pose_inv
        ]
        lms = np.stack([np.asarray(values[k], dtype=float) for k in self._lm_unique])[
            self._lm_inv
        ]
        v = np.einsum("nij,nj->ni", rot, lms)
        return rot, v, v + trans


class ReprojectionSet(_PoseLandmarkSet):
    """Pixel residuals: measurement - project(pose * landmark)."""

    tag = "reprojection"
    dim = 2

    def __init__(
        self,
        pose_keys,
        landmark_keys,
        measurements,
        intrinsics: CameraIntrinsics,
        loss: RobustLoss,
        weights,
        block_ids,
    ):
        super().__init__(pose_keys, landmark_keys, weights, block_ids, loss, intrinsics)
        self.measurements = np.asarray(measurements, dtype=float).reshape(-1, 2)

    def _project_parts(self, values):
        _, v, y = self._transformed(values)
        z = np.maximum(y[:, 2], _DEPTH_CLAMP)
        k = self.intrinsics
        proj = np.column_stack(
            [k.fx * y[:, 0] / z + k.cx, k.fy * y[:, 1] / z + k.cy]
        )
        # d(projection)/dy, (n, 2, 3)
        dpi = np.zeros((len(z), 2, 3))
        dpi[:, 0, 0] = k.fx / z
        dpi[:, 0, 2] = -k.fx * y[:, 0] / z**2
        dpi[:, 1, 1] = k.fy / z
        dpi[:, 1, 2] = -k.fy * y[:, 1] / z**2
        return v, proj, dpi

    def residuals(self, values):
        _, proj, _ = self._project_parts(values)
        return self.measurements - proj

    def jacobian_slots(self, values):
        rot = np.stack([values[k].rotation for k in self._pose_unique])[self._pose_inv]
        v, _, dpi = self._project_parts(values)
        # r = z - pi(y); dy/dw = -[v]x, dy/dt = I, dy/dl = R
        j_rot = np.einsum("nij,njk->nik", dpi, _skew_batch(v))
        j_pose = np.concatenate([j_rot, -dpi], axis=2)
        j_lm = -np.einsum("nij,njk->nik", dpi, rot)
        return [(self.pose_keys, j_pose), (self.landmark_keys, j_lm)]

    def subset(self, keep):
        return ReprojectionSet(
            self.pose_keys[keep],
            self.landmark_keys[keep],
            self.measurements[keep],
            self.intrinsics,
            self.loss,
            self.weights[keep],
            self.block_ids[keep],
        )


class DepthSet(_PoseLandmarkSet):
    """Metric residuals: measured depth - camera-frame z of the landmark."""

    tag = "depth"
    dim = 1

    def __init__(self, pose_keys, landmark_keys, measured_depths, loss, weights, block_ids):
        super().__init__(pose_keys, landmark_keys, weights, block_ids, loss, None)
        self.measured_depths = np.asarray(measured_depths, dtype=float).ravel()

    def residuals(self, values):
        _, _, y = self._transformed(values)
        return (self.measured_depths - y[:, 2]).reshape(-1, 1)

    def jacobian_slots(self, values):
        rot, v, _ = self._transformed(values)
        n = len(v)
        j_pose = np.zeros((n, 1, 6))
        # d r / d w = e3^T [v]x = (-v1, v0, 0)
        j_pose[:, 0, 0] = -v[:, 1]
        j_pose[:, 0, 1] = v[:, 0]
        j_pose[:, 0, 5] = -1.0
        j_lm = -rot[:, 2, :].reshape(n, 1, 3)
        return [(self.pose_keys, j_pose), (self.landmark_keys, j_lm)]

    def subset(self, keep):
        return DepthSet(
            self.pose_keys[keep],
            self.landmark_keys[keep],
            self.measured_depths[keep],
            self.loss,
            self.weights[keep],
            self.block_ids[keep],
        )


class PnpSet(ResidualSet):
    """Frame-to-frame reprojection against fixed previous-frame 3d points.

    All blocks share a single motion pose; the points (backprojected from the
    previous frame at their measured depth) are data, not parameters.
    """

    tag = "pnp"
    dim = 2

    def __init__(
        self,
        pose_key,
        points_prev,
        measurements,
        intrinsics: CameraIntrinsics,
        loss: RobustLoss,
        weights,
        block_ids,
    ):
        self.pose_key = pose_key
        self.points_prev = np.asarray(points_prev, dtype=float).reshape(-1, 3)
        self.measurements = np.asarray(measurements, dtype=float).reshape(-1, 2)
        self.intrinsics = intrinsics
        self.loss = loss
        self.weights = np.asarray(weights, dtype=float)
        self.block_ids = np.asarray(block_ids, dtype=int)

    def slot_keys(self):
        return [_as_key_array([self.pose_key] * len(self.block_ids))]

    def _parts(self, values):
        pose: Pose = values[self.pose_key]
        v = self.points_prev @ pose.rotation.T
        y = v + pose.translation
        z = np.maximum(y[:, 2], _DEPTH_CLAMP)
        k = self.intrinsics
        proj = np.column_stack([k.fx * y[:, 0] / z + k.cx, k.fy * y[:, 1] / z + k.cy])
        dpi = np.zeros((len(z), 2, 3))
        dpi[:, 0, 0] = k.fx / z
        dpi[:, 0, 2] = -k.fx * y[:, 0] / z**2
        dpi[:, 1, 1] = k.fy / z
        dpi[:, 1, 2] = -k.fy * y[:, 1] / z**2
        return v, proj, dpi

    def residuals(self, values):
        _, proj, _ = self._parts(values)
        return self.measurements - proj

    def jacobian_slots(self, values):
        v, _, dpi = self._parts(values)
        j_rot = np.einsum("nij,njk->nik", dpi, _skew_batch(v))
        j_pose = np.concatenate([j_rot, -dpi], axis=2)
        return [(self.slot_keys()[0], j_pose)]

    def subset(self, keep):
        return PnpSet(
            self.pose_key,
            self.points_prev[keep],
            self.measurements[keep],
            self.intrinsics,
            self.loss,
            self.weights[keep],
            self.block_ids[keep],
        )


class EpipolarSet(ResidualSet):
    """Algebraic epipolar residuals cur_h^T F(motion) prev_h, one shared pose.

    F is built from the normalized translation direction, so the residual is
    invariant to the translation scale; for near-zero translation the
    rotation-only fallback of fundamental_matrix applies and the translation
    Jacobian is zero.
    """

    tag = "epipolar"
    dim = 1

    def __init__(self, pose_key, pixels_cur, pixels_prev, intrinsics, loss, weights, block_ids):
        self.pose_key = pose_key
        cur = np.asarray(pixels_cur, dtype=float).reshape(-1, 2)
        prev = np.asarray(pixels_prev, dtype=float).reshape(-1, 2)
        self.cur_h = np.column_stack([cur, np.ones(len(cur))])
        self.prev_h = np.column_stack([prev, np.ones(len(prev))])
        self.intrinsics = intrinsics
        self.loss = loss
        self.weights = np.asarray(weights, dtype=float)
        self.block_ids = np.asarray(block_ids, dtype=int)

    def slot_keys(self):
        return [_as_key_array([self.pose_key] * len(self.block_ids))]

    def _f_and_derivatives(self, pose: Pose):
        k_inv = self.intrinsics.matrix_inv
        t = pose.translation
        norm_t = np.linalg.norm(t)
        if norm_t < 1e-12:
            g = k_inv.T @ pose.rotation @ k_inv
            n = np.linalg.norm(g)
            f = g / n
            d_g = np.zeros((6, 3, 3))
            for a in range(3):
                e = np.zeros(3)
                e[a] = 1.0
                d_g[a] = k_inv.T @ skew(e) @ pose.rotation @ k_inv
        else:
            u = t / norm_t
            g = k_inv.T @ skew(u) @ pose.rotation @ k_inv
            n = np.linalg.norm(g)
            f = g / n
            d_g = np.zeros((6, 3, 3))
            for a in range(3):
                e = np.zeros(3)
                e[a] = 1.0
                d_g[a] = k_inv.T @ skew(u) @ skew(e) @ pose.rotation @ k_inv
            du = (np.eye(3) - np.outer(u, u)) / norm_t
            for a in range(3):
                d_g[3 + a] = k_inv.T @ skew(du[:, a]) @ pose.rotation @ k_inv
        d_f = np.zeros((6, 3, 3))
        for a in range(6):
            d_f[a] = (d_g[a] - f * np.sum(f * d_g[a])) / n
        return f, d_f

    def residuals(self, values):
        f, _ = self._f_and_derivatives(values[self.pose_key])
        return np.einsum("ni,ij,nj->n", self.cur_h, f, self.prev_h).reshape(-1, 1)

    def jacobian_slots(self, values):
        _, d_f = self._f_and_derivatives(values[self.pose_key])
        jac = np.einsum("ni,aij,nj->na", self.cur_h, d_f, self.prev_h)
        return [(self.slot_keys()[0], jac.reshape(-1, 1, 6))]

    def subset(self, keep):
        return EpipolarSet(
            self.pose_key,
            self.cur_h[keep, :2],
            self.prev_h[keep, :2],
            self.intrinsics,
            self.loss,
            self.weights[keep],
            self.block_ids[keep],
        )


class ScaleRegularizerSet(ResidualSet):
    """Single block tying the oldest relative translation to its prior value.

    Residual = s_hat(newer, older) - s where s_hat is the (squared by
    default) norm of the translation of older^-1 * newer.
    """

    tag = "scale"
    dim = 1

    def __init__(self, older_key, newer_key, captured, weight, block_id, squared=True):
        self.older_key = older_key
        self.newer_key = newer_key
        self.captured = float(captured)
        self.squared = squared
        self.loss = RobustLoss()
        self.weights = np.array([float(weight)])
        self.block_ids = np.array([int(block_id)])

    def slot_keys(self):
        return [_as_key_array([self.older_key]), _as_key_array([self.newer_key])]

    @staticmethod
    def relative_scale(older: Pose, newer: Pose, squared: bool = True) -> float:
        t_rel = older.rotation.T @ (newer.translation - older.translation)
        s = float(np.dot(t_rel, t_rel))
        return s if squared else float(np.sqrt(s))

    def residuals(self, values):
        s_hat = self.relative_scale(
            values[self.older_key], values[self.newer_key], self.squared
        )
        return np.array([[s_hat - self.captured]])

    def jacobian_slots(self, values):
        older: Pose = values[self.older_key]
        newer: Pose = values[self.newer_key]
        dt = newer.translation - older.translation
        t_rel = older.rotation.T @ dt
        # d t_rel: dw0 -> R0^T [dt]x, dt0 -> -R0^T, dw1 -> 0, dt1 -> R0^T
        d_older = np.zeros((1, 1, 6))
        d_newer = np.zeros((1, 1, 6))
        if self.squared:
            lead = 2.0 * t_rel
        else:
            norm = max(np.linalg.norm(t_rel), 1e-15)
            lead = t_rel / norm
        d_older[0, 0, :3] = lead @ (older.rotation.T @ skew(dt))
        d_older[0, 0, 3:] = -(lead @ older.rotation.T)
        d_newer[0, 0, 3:] = lead @ older.rotation.T
        return [
            (_as_key_array([self.older_key]), d_older),
            (_as_key_array([self.newer_key]), d_newer),
        ]

    def subset(self, keep):
        if not keep[0]:
            raise ValueError("cannot subset the scale block away")
        return self
