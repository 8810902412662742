"""Frame-to-frame motion from joint PnP and epipolar costs.

The previous frame's features with a valid LIDAR depth anchor the translation
scale through reprojection (PnP) residuals; every match additionally
contributes an epipolar residual, which stabilizes rotation when few depths
are available. Both classes are Cauchy-robustified.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    CameraIntrinsics,
    NonPositiveDepth,
    Pose,
    backproject,
    fundamental_matrix,
    project,
)
from .residuals import EpipolarSet, PnpSet
from .solver import Problem, RobustLoss, Tolerances, solve_lm

MAX_MATCH_DEPTH = 30.0


class Underconstrained(Exception):
    """Not enough matches to estimate a 6-DOF motion."""


@dataclass(frozen=True)
class Match:
    """One feature correspondence: current pixel, previous pixel, and the
    previous observation's depth when Block S produced one."""

    cur: np.ndarray
    prev: np.ndarray
    depth_prev: float | None = None


@dataclass
class FrameMatchSet:
    matches: list[Match]
    intrinsics: CameraIntrinsics
    max_depth: float = MAX_MATCH_DEPTH

    def __post_init__(self):
        for i, m in enumerate(self.matches):
            pixels = np.vstack([m.cur, m.prev])
            if not self.intrinsics.contains(pixels).all():
                raise ValueError(f"match {i}: pixel outside image bounds")
            if m.depth_prev is not None and not (0.0 < m.depth_prev <= self.max_depth):
                raise ValueError(f"match {i}: depth {m.depth_prev} out of range")

    def with_depth(self) -> list[Match]:
        return [m for m in self.matches if m.depth_prev is not None]

    def mean_flow(self) -> float:
        if not self.matches:
            return 0.0
        flows = np.array([m.cur - m.prev for m in self.matches])
        return float(np.mean(np.linalg.norm(flows, axis=1)))

    def __len__(self) -> int:
        return len(self.matches)


def pnp_residual(match: Match, motion: Pose, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Reprojection gap of the previous frame's 3d point under a motion.

    Raises NonPositiveDepth when the transformed point falls behind the
    camera (propagated from the projection).
    """
    if match.depth_prev is None:
        raise ValueError("pnp residual needs a match with depth")
    point_prev = backproject(match.prev, match.depth_prev, intrinsics)
    return match.cur - project(motion.transform(point_prev), intrinsics)


def epipolar_residual(match: Match, motion: Pose, intrinsics: CameraIntrinsics) -> float:
    """Algebraic epipolar constraint in homogeneous pixel coordinates.

    Depends only on the rotation and the translation direction; invariant to
    the translation scale.
    """
    f = fundamental_matrix(motion, intrinsics)
    return float(np.append(match.cur, 1.0) @ f @ np.append(match.prev, 1.0))


@dataclass
class PriorConfig:
    pnp_loss_scale: float = 1.0       # pixels
    epipolar_loss_scale: float = 0.1  # algebraic units, ~1 px of noise
    pnp_weight: float = 1.0
    epipolar_weight: float = 1.0
    max_matches: int = 250
    max_iterations: int = 40
    tolerances: Tolerances = field(
        default_factory=lambda: Tolerances(gradient=1e-12, step=1e-14, cost=1e-14)
    )


def _thin(matches: list[Match], cap: int) -> list[Match]:
    """Deterministic even subsample to bound the problem size."""
    if len(matches) <= cap:
        return matches
    idx = np.linspace(0, len(matches) - 1, cap).astype(int)
    return [matches[i] for i in idx]


def estimate_prior(
    matches: FrameMatchSet,
    init: Pose | None = None,
    cfg: PriorConfig | None = None,
) -> Pose:
    """Robust 6-DOF motion minimizing the joint PnP + epipolar cost.

    Requires at least 3 matches with depth or 8 matches total. With zero
    depth-carrying matches the translation scale is unobservable and its norm
    is held at the initial value (direction and rotation still optimize).
    """
    cfg = cfg or PriorConfig()
    init = init or Pose.identity()
    with_depth = matches.with_depth()
    if len(with_depth) < 3 and len(matches) < 8:
        raise Underconstrained(
            f"{len(with_depth)} depth matches / {len(matches)} total"
        )
    with_depth = _thin(with_depth, cfg.max_matches)
    all_matches = _thin(matches.matches, cfg.max_matches)

    problem = Problem()
    manifold = "pose" if with_depth else "pose_fixed_scale"
    problem.add_parameter("motion", init, manifold=manifold)
    if with_depth:
        points = np.array(
            [backproject(m.prev, m.depth_prev, matches.intrinsics) for m in with_depth]
        )
        meas = np.array([m.cur for m in with_depth])
        problem.add_residual_set(
            PnpSet(
                "motion",
                points,
                meas,
                matches.intrinsics,
                RobustLoss("cauchy", cfg.pnp_loss_scale),
                np.full(len(with_depth), cfg.pnp_weight),
                problem.claim_block_ids(len(with_depth)),
            )
        )
    problem.add_residual_set(
        EpipolarSet(
            "motion",
            np.array([m.cur for m in all_matches]),
            np.array([m.prev for m in all_matches]),
            matches.intrinsics,
            RobustLoss("cauchy", cfg.epipolar_loss_scale),
            np.full(len(all_matches), cfg.epipolar_weight),
            problem.claim_block_ids(len(all_matches)),
        )
    )
    solve_lm(problem, tolerances=cfg.tolerances, max_iters=cfg.max_iterations)
    return problem.value("motion")
