from dataclasses import replace

import numpy as np
import pytest

from plencal.ba import CalibrationProblem, evaluate_cost, minimum_residual_count, residual, residuals, solve
from plencal.data import ScaleConstraint
from plencal.errors import Diverged, SingularSystem
from plencal.geometry import Pose
from plencal.lm import INVALID_RESIDUAL, BundleProblem, BundleState, SolveOptions, _solve_spd, solve_lm
from plencal.model import PlenopticIntrinsics, project_to_virtual, VirtualPoint, project_virtual_to_raw, distort

from conftest import gt_problem
from solver_check import random_iterate, small_problem, step_pair


def perturbed(problem, rng, rel=0.01):
    v = problem.intrinsics.to_vector()
    v[:5] *= 1 + rel * rng.choice([-1, 1], 5)
    intr = PlenopticIntrinsics.from_vector(v, problem.intrinsics.s_x, problem.intrinsics.s_y)
    poses = [problem.poses[0]] + [Pose(p.rotation, p.translation * (1 + rel * rng.normal()))
                                  for p in problem.poses[1:]]
    pts = problem.points * (1 + rel * rng.normal(size=problem.points.shape))
    return replace(problem, intrinsics=intr, poses=poses, points=pts)


def scalar_reprojection(intr, grid, pose, X_W, lens):
    """Chain of the scalar model operations without the micro image check."""
    vp = project_to_virtual(intr, pose.transform(X_W))
    c = intr.principal
    c_Id = distort(intr.distortion, c, grid.centers[lens])
    c_ML = c + (c_Id - c) * intr.b_L0 / (intr.b_L0 + intr.B)
    return distort(intr.distortion, c, project_virtual_to_raw(vp, c_ML))


def test_residual_zero_at_ground_truth(small_clean):
    p = gt_problem(small_clean)
    r, invalid = residuals(p)
    assert np.max(np.abs(r)) < 1e-9
    assert not invalid.any()


def test_residual_linear_in_measurement(small_clean):
    ds = small_clean
    p = CalibrationProblem(ds.intrinsics_gt, ds.grid, ds.poses_gt, ds.points_gt, ds.observations)
    xy = ds.observations.xy.copy()
    xy[5, 0] += 0.3
    r = residual(replace(p, observations=ds.observations.with_xy(xy)), 5)
    assert r[0] == ds.observations.xy[5, 0] - xy[5, 0]
    assert r[0] == pytest.approx(-0.3, abs=1e-12)
    assert r[1] == 0.0


def test_residual_after_focal_perturbation_matches_reprojection(small_clean):
    ds = small_clean
    intr = ds.intrinsics_gt.with_values(f_L=ds.intrinsics_gt.f_L * 1.001)
    p = CalibrationProblem(intr, ds.grid, ds.poses_gt, ds.points_gt, ds.observations)
    r, _ = residuals(p)
    obs = ds.observations
    for i in range(0, len(obs), max(1, len(obs) // 150)):
        pred = scalar_reprojection(intr, ds.grid, ds.poses_gt[obs.view_ids[i]], ds.points_gt[obs.point_ids[i]],
                                   obs.lens_ids[i])
        np.testing.assert_allclose(r[i], pred - obs.xy[i], atol=1e-9)
    assert np.abs(r).max() > 0.01


def test_invalid_geometry_gets_constant_residual(small_clean):
    p = gt_problem(small_clean)
    pts = p.points.copy()
    pid = p.observations.point_ids[0]
    pts[pid] = [0.0, 0.0, -100.0]  # behind view 0
    r, invalid = residuals(replace(p, points=pts))
    rows = (p.observations.point_ids == pid) & (p.observations.view_ids == 0)
    assert invalid[rows].all()
    np.testing.assert_array_equal(r[rows], [[INVALID_RESIDUAL, 0.0]] * int(rows.sum()))
    _, stats = evaluate_cost(replace(p, points=pts))
    assert stats["invalid"] >= rows.sum()


def test_problem_validation(small_clean):
    p = gt_problem(small_clean)
    assert "pose_0" in p.fixed
    with pytest.raises(ValueError):
        replace(p, fixed={"focal"})
    with pytest.raises(ValueError):
        replace(p, points=p.points[:3])
    n = minimum_residual_count(p)
    assert n == 10 + 6 * (len(p.poses) - 1) + 3 * len(p.points)
    assert 2 * len(p.observations) > n


def test_solve_recovers_noiseless_ground_truth(small_clean, rng):
    p = gt_problem(small_clean)
    start = perturbed(p, rng)
    init_cost, _ = evaluate_cost(start)
    res, rep = solve(start)
    assert rep.initial_cost == init_cost
    assert rep.final_cost < 1e-16
    np.testing.assert_allclose(res.intrinsics.to_vector()[:5], p.intrinsics.to_vector()[:5], rtol=1e-8)
    accepted = [h.cost for h in rep.history if h.accepted]
    assert all(b < a for a, b in zip([rep.initial_cost] + accepted, accepted))
    assert rep.termination in ("gradient_tolerance", "zero_cost", "parameter_tolerance", "function_tolerance")


def test_fixed_parameters_do_not_move(small_clean, rng):
    p = gt_problem(small_clean)
    start = perturbed(p, rng, rel=0.002)
    start = replace(start, intrinsics=start.intrinsics.with_values(f_L=16.748, B=0.376), fixed={"f_L", "B", "pose_3"})
    res, _ = solve(start)
    assert res.intrinsics.f_L == 16.748 and res.intrinsics.B == 0.376
    np.testing.assert_array_equal(res.poses[3].translation, start.poses[3].translation)
    np.testing.assert_array_equal(res.poses[0].translation, start.poses[0].translation)


def test_gauge_transform_leaves_solution_unchanged(small_clean, rng):
    p = gt_problem(small_clean)
    G = Pose(np.array([0.1, -0.2, 0.05, 0.97]) / np.linalg.norm([0.1, -0.2, 0.05, 0.97]), [30.0, -20.0, 100.0])
    Ginv = G.inverse()
    moved = replace(p, poses=[q.compose(Ginv) for q in p.poses], points=G.transform(p.points))
    cost, _ = evaluate_cost(moved)
    assert cost < 1e-16
    start_a = perturbed(p, np.random.default_rng(5))
    start_b = replace(start_a, poses=[q.compose(Ginv) for q in start_a.poses], points=G.transform(start_a.points))
    ra, _ = solve(start_a)
    rb, _ = solve(start_b)
    np.testing.assert_allclose(rb.intrinsics.to_vector()[:5], ra.intrinsics.to_vector()[:5], rtol=1e-10)


def test_huber_with_infinite_scale_is_least_squares(small_noisy, rng):
    # constraint weights are divided by the Huber scale, so compare without
    # them; fixing f_L and B removes the scale freedom instead
    p = perturbed(gt_problem(small_noisy), rng, rel=0.002)
    p = replace(p, scale_constraints=[], intrinsics=p.intrinsics.with_values(f_L=16.748, B=0.376),
                fixed={"f_L", "B"})
    a, _ = solve(replace(p, robust_scale=None), SolveOptions(robust_scale=None, compute_covariance=False))
    b, _ = solve(replace(p, robust_scale=1e9), SolveOptions(robust_scale=1e9, compute_covariance=False))
    np.testing.assert_allclose(b.intrinsics.to_vector(), a.intrinsics.to_vector(), rtol=1e-8, atol=1e-20)


def test_scale_constraints_fix_metric_scale(small_clean, rng):
    p = gt_problem(small_clean)
    # without constraints, a uniformly scaled start has a different scale optimum in B/b_L0 terms
    start = replace(p, points=p.points * 1.02, poses=[Pose(q.rotation, q.translation * 1.02) for q in p.poses])
    assert p.scale_constraints
    res, _ = solve(start)
    for c in res.scale_constraints:
        d = np.linalg.norm(res.points[c.point_a] - res.points[c.point_b])
        assert d == pytest.approx(c.distance, rel=1e-8)


def test_schur_step_matches_dense_step():
    rng = np.random.default_rng(0)
    for seed in range(3):
        p = random_iterate(small_problem(seed), rng)
        for lam in (1e-4, 1.0):
            assert step_pair(p, lam) < 1e-8


def test_solve_spd_rejects_indefinite():
    with pytest.raises(SingularSystem):
        _solve_spd(np.array([[1.0, 2.0], [2.0, 1.0]]), np.ones(2))


def test_uphill_jacobian_diverges():
    # a model whose Jacobian has the wrong sign never produces a descent step
    measured = np.array([[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]])

    def model(theta, R, t, X, jac):
        pred = np.tile(theta[:2], (3, 1))
        if not jac:
            return pred, np.ones(3, bool), None, None, None
        Ji = np.zeros((3, 2, 2))
        Ji[:, 0, 0] = Ji[:, 1, 1] = -1.0
        return pred, np.ones(3, bool), Ji, np.zeros((3, 2, 6)), np.zeros((3, 2, 3))

    prob = BundleProblem(model, measured, np.zeros(3, int), np.zeros(3, int), 1, 1, [True, True],
                         frozen_coords=np.ones((1, 3), bool))
    state = BundleState(np.zeros(2), np.array([[0.0, 0, 0, 1]]), np.zeros((1, 3)), np.zeros((1, 3)))
    with pytest.raises(Diverged):
        solve_lm(prob, state, SolveOptions(robust_scale=None, compute_covariance=False))


def test_max_iterations_reported(small_clean, rng):
    start = perturbed(gt_problem(small_clean), rng)
    _, rep = solve(start, SolveOptions(max_iter=2, compute_covariance=False))
    assert rep.termination == "max_iterations"
    assert rep.iterations == 2
    d = rep.to_dict()
    assert d["termination"] == "max_iterations" and len(d["history"]) >= 2


def test_covariance_diagonal_reported(small_noisy, rng):
    p = perturbed(gt_problem(small_noisy), rng, rel=0.001)
    _, rep = solve(p)
    assert rep.covariance_diag is not None
    assert np.all(rep.covariance_diag[:5] > 0)
