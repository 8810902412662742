import math

import numpy as np
import pytest

from lmvo.geometry import CameraIntrinsics, Pose, project, rotation_exp
from lmvo.residuals import DepthSet, PnpSet, ReprojectionSet
from lmvo.solver import (
    EmptyProblem,
    Problem,
    RobustLoss,
    Tolerances,
    TrimConfig,
    cauchy,
    solve_lm,
    solve_trimmed,
)

CAM = CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)


# ------------------------------------------------------------------ cauchy


def test_cauchy_at_zero():
    value, deriv = cauchy(0.0, 1.0)
    assert value == 0.0
    assert deriv == 1.0


def test_cauchy_closed_form_value():
    value, _ = cauchy(1.0, 1.0)
    assert value == pytest.approx(math.log(2.0), abs=1e-12)


def test_cauchy_monotone_and_concave():
    xs = np.linspace(0.0, 50.0, 200)
    values, derivs = zip(*(cauchy(x, 1.3) for x in xs))
    assert all(b > a for a, b in zip(values, values[1:]))
    assert all(b < a for a, b in zip(derivs, derivs[1:]))


def test_cauchy_approximates_identity_for_small_x():
    value, _ = cauchy(1e-8, 1.0)
    assert value == pytest.approx(1e-8, rel=1e-6)


def test_robust_loss_validation():
    with pytest.raises(ValueError):
        RobustLoss(kind="huber")
    with pytest.raises(ValueError):
        RobustLoss(kind="cauchy", scale=0.0)


# ------------------------------------------------------------------ solve_lm


def test_linear_problem_one_step():
    problem = Problem()
    problem.add_parameter("theta", [0.0])
    problem.add_residual(lambda th: th - 3.0, ["theta"], jac=lambda th: [np.eye(1)])
    summary = solve_lm(problem)
    assert problem.value("theta")[0] == pytest.approx(3.0, abs=1e-10)
    assert summary.final_cost <= summary.initial_cost


def test_rosenbrock():
    problem = Problem()
    problem.add_parameter("x", [-1.2, 1.0])

    def residual(x):
        return np.array([10.0 * (x[1] - x[0] ** 2), 1.0 - x[0]])

    def jacobian(x):
        return [np.array([[-20.0 * x[0], 10.0], [-1.0, 0.0]])]

    problem.add_residual(residual, ["x"], jac=jacobian)
    solve_lm(problem, max_iters=200)
    assert np.allclose(problem.value("x"), [1.0, 1.0], atol=1e-6)


def test_clean_pnp_recovers_pose():
    rng = np.random.default_rng(5)
    true_motion = Pose(rotation_exp([0.01, 0.03, -0.02]), [0.1, -0.05, 0.4])
    points = np.column_stack(
        [rng.uniform(-4, 4, 20), rng.uniform(-2, 2, 20), rng.uniform(5, 25, 20)]
    )
    meas = np.array([project(true_motion.transform(p), CAM) for p in points])
    problem = Problem()
    problem.add_parameter("motion", Pose.identity(), manifold="pose")
    problem.add_residual_set(
        PnpSet("motion", points, meas, CAM, RobustLoss(), np.ones(20), problem.claim_block_ids(20))
    )
    solve_lm(problem, tolerances=Tolerances(gradient=1e-14), max_iters=100)
    recovered = problem.value("motion")
    assert np.allclose(recovered.rotation, true_motion.rotation, atol=1e-8)
    assert np.allclose(recovered.translation, true_motion.translation, atol=1e-8)


def test_cost_nonincreasing_across_accepted_steps():
    problem = Problem()
    problem.add_parameter("x", [-1.2, 1.0])
    problem.add_residual(
        lambda x: np.array([10.0 * (x[1] - x[0] ** 2), 1.0 - x[0]]),
        ["x"],
        jac=lambda x: [np.array([[-20.0 * x[0], 10.0], [-1.0, 0.0]])],
    )
    costs = []
    solve_lm(problem, max_iters=100, log=lambda line: costs.append(float(line.split("cost=")[1].split()[0])))
    assert all(b <= a + 1e-15 for a, b in zip(costs, costs[1:]))


def test_empty_problem_raises():
    problem = Problem()
    problem.add_parameter("x", [0.0])
    with pytest.raises(EmptyProblem):
        solve_lm(problem)


def test_constant_parameter_is_untouched():
    problem = Problem()
    problem.add_parameter("a", [0.0])
    problem.add_parameter("b", [0.0], constant=True)
    problem.add_residual(
        lambda a, b: a + b - 5.0, ["a", "b"], jac=lambda a, b: [np.eye(1), np.eye(1)]
    )
    solve_lm(problem)
    assert problem.value("b")[0] == 0.0
    assert problem.value("a")[0] == pytest.approx(5.0, abs=1e-9)


# -------------------------------------------------------------- solve_trimmed


def _make_ba_problem(rng, n_landmarks=40, n_poses=4, outlier_fraction=0.0, outlier_scale=10.0):
    """Small synthetic BA problem; returns (problem, truth, planted outlier ids)."""
    true_poses = [
        Pose(rotation_exp(rng.normal(scale=0.01, size=3)), [0.4 * j, 0.0, 0.0])
        for j in range(n_poses)
    ]
    landmarks = np.column_stack(
        [
            rng.uniform(-6, 6, n_landmarks),
            rng.uniform(-3, 3, n_landmarks),
            rng.uniform(6, 25, n_landmarks),
        ]
    )
    problem = Problem()
    for j, p in enumerate(true_poses):
        init = p if j == 0 else p.plus(rng.normal(scale=1e-3, size=6))
        problem.add_parameter(("pose", j), init, manifold="pose", constant=(j == 0))
    for i in range(n_landmarks):
        problem.add_parameter(("lm", i), landmarks[i] + rng.normal(scale=1e-3, size=3))

    pose_keys, lm_keys, meas = [], [], []
    d_pose, d_lm, d_val = [], [], []
    for i in range(n_landmarks):
        for j, p in enumerate(true_poses):
            cam_point = p.transform(landmarks[i])
            pix = project(cam_point, CAM)
            pose_keys.append(("pose", j))
            lm_keys.append(("lm", i))
            meas.append(pix)
            if j % 2 == 0:
                d_pose.append(("pose", j))
                d_lm.append(("lm", i))
                d_val.append(cam_point[2])
    repr_ids = problem.claim_block_ids(len(meas))
    depth_ids = problem.claim_block_ids(len(d_val))
    d_val = np.array(d_val)
    n_outliers = int(round(outlier_fraction * len(d_val)))
    outlier_ids = []
    if n_outliers:
        idx = rng.choice(len(d_val), size=n_outliers, replace=False)
        d_val[idx] += outlier_scale * rng.choice([-1.0, 1.0], size=n_outliers)
        outlier_ids = sorted(int(depth_ids[i]) for i in idx)
    problem.add_residual_set(
        ReprojectionSet(pose_keys, lm_keys, meas, CAM, RobustLoss("cauchy", 1.0), np.ones(len(meas)), repr_ids)
    )
    problem.add_residual_set(
        DepthSet(d_pose, d_lm, d_val, RobustLoss("cauchy", 0.3), np.ones(len(d_val)), depth_ids)
    )
    return problem, true_poses, landmarks, outlier_ids


def _pose_error(problem, true_poses):
    err = 0.0
    for j, p in enumerate(true_poses):
        est = problem.value(("pose", j))
        err += np.linalg.norm(est.translation - p.translation)
    return err


def test_trim_zero_reproduces_solve_lm_bit_for_bit():
    rng = np.random.default_rng(42)
    prob_a, truth, _, _ = _make_ba_problem(rng)
    rng = np.random.default_rng(42)
    prob_b, _, _, _ = _make_ba_problem(rng)
    tol = Tolerances()
    solve_lm(prob_a, tolerances=tol, max_iters=110)
    solve_trimmed(
        prob_b,
        TrimConfig(steps=[5, 5], rejection_fraction=0.0, max_final_iterations=100, tolerances=tol),
    )
    for key in prob_a.parameter_keys():
        va, vb = prob_a.value(key), prob_b.value(key)
        if isinstance(va, Pose):
            assert va.rotation.tobytes() == vb.rotation.tobytes()
            assert va.translation.tobytes() == vb.translation.tobytes()
        else:
            assert va.tobytes() == vb.tobytes()


def test_trimmed_removes_planted_outliers():
    rng = np.random.default_rng(0)
    prob_clean, truth, _, _ = _make_ba_problem(rng, outlier_fraction=0.0)
    solve_lm(prob_clean, max_iters=60)
    clean_err = _pose_error(prob_clean, truth)

    rng = np.random.default_rng(0)
    prob, truth, _, planted = _make_ba_problem(rng, outlier_fraction=0.10)
    result = solve_trimmed(prob, TrimConfig(steps=[5, 5], rejection_fraction=10.0))
    assert set(planted).issubset(set(result.removed_block_ids))
    assert _pose_error(prob, truth) < max(10.0 * clean_err, 1e-6)


def test_trim_counts_and_tie_breaking():
    # blocks with equal residual norms: removal must take exactly
    # floor(rl% * count) per class, lowest ids first among ties
    problem = Problem()
    problem.add_parameter(("pose", 0), Pose.identity(), manifold="pose", constant=True)
    n = 12
    for i in range(n):
        problem.add_parameter(("lm", i), [0.0, 0.0, 10.0])
    ids = problem.claim_block_ids(n)
    problem.add_residual_set(
        DepthSet(
            [("pose", 0)] * n,
            [("lm", i) for i in range(n)],
            np.full(n, 10.0 + 5.0),  # every residual = 5.0
            RobustLoss(),
            np.ones(n),
            ids,
        )
    )
    result = solve_trimmed(
        problem, TrimConfig(steps=[1], rejection_fraction=25.0, max_final_iterations=0)
    )
    # floor(0.25 * 12) = 3 blocks, ties resolved toward the lowest block id
    removed_first_stage = result.removed_block_ids[:3]
    assert len(removed_first_stage) == 3
    assert removed_first_stage == sorted(ids.tolist())[:3]


def test_orphaned_parameter_removed():
    problem = Problem()
    problem.add_parameter(("pose", 0), Pose.identity(), manifold="pose", constant=True)
    problem.add_parameter(("lm", 0), [0.0, 0.0, 10.0])
    problem.add_parameter(("lm", 1), [1.0, 0.0, 10.0])
    ids = problem.claim_block_ids(10)
    # lm 0 has one gross-outlier depth residual, lm 1 has nine good ones
    problem.add_residual_set(
        DepthSet(
            [("pose", 0)] * 10,
            [("lm", 0)] + [("lm", 1)] * 9,
            np.array([100.0] + [10.0] * 9),
            RobustLoss(),
            np.ones(10),
            ids,
        )
    )
    # a zero-iteration stage trims on the initial residuals
    result = solve_trimmed(problem, TrimConfig(steps=[0], rejection_fraction=10.0))
    assert int(ids[0]) in result.removed_block_ids
    assert ("lm", 0) in result.removed_parameters
    assert problem.is_removed(("lm", 0))
    # removed parameter keeps the value it had when it left the problem
    assert np.allclose(problem.value(("lm", 0)), [0.0, 0.0, 10.0])


def test_trim_config_validation():
    with pytest.raises(ValueError):
        TrimConfig(rejection_fraction=50.0)
    with pytest.raises(ValueError):
        TrimConfig(steps=[])
