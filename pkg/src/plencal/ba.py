"""Plenoptic bundle adjustment over micro-image residuals."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import ObservationSet
from .geometry import stack_poses, unstack_poses
from .lm import BundleProblem, BundleState, SolveOptions, SolveReport, huber, solve_lm
from .model import INTRINSIC_NAMES, MicroLensGrid, PlenopticIntrinsics, project_points

__all__ = ["CalibrationProblem", "SolveOptions", "SolveReport", "residual", "residuals", "evaluate_cost", "solve",
           "build_bundle"]


@dataclass
class CalibrationProblem:
    intrinsics: PlenopticIntrinsics
    grid: MicroLensGrid
    poses: list
    points: np.ndarray
    observations: ObservationSet
    scale_constraints: list = field(default_factory=list)
    fixed: set = field(default_factory=lambda: {"pose_0"})
    robust_scale: float | None = 1.0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.fixed = set(self.fixed) | {"pose_0"}
        unknown = {f for f in self.fixed if f not in INTRINSIC_NAMES and not f.startswith("pose_")}
        if unknown:
            raise ValueError(f"unknown fixed parameter(s): {sorted(unknown)}")
        obs = self.observations
        if len(obs):
            if obs.point_ids.max() >= len(self.points) or obs.view_ids.max() >= len(self.poses):
                raise ValueError("observation refers to a missing point or view")
            if obs.lens_ids.max() >= self.grid.num_lenses or obs.lens_ids.min() < 0:
                raise ValueError("observation refers to a missing micro lens")
        for c in self.scale_constraints:
            if max(c.point_a, c.point_b) >= len(self.points):
                raise ValueError("scale constraint refers to a missing point")

    @property
    def fixed_views(self):
        return sorted(int(f.split("_", 1)[1]) for f in self.fixed if f.startswith("pose_"))

    @property
    def free_intrinsics(self):
        return np.array([name not in self.fixed for name in INTRINSIC_NAMES])


def build_bundle(problem):
    """Generic bundle problem and state for a :class:`CalibrationProblem`."""
    intr = problem.intrinsics
    obs = problem.observations
    centers = problem.grid.centers
    lens = obs.lens_ids
    vi, pi = obs.view_ids, obs.point_ids
    s_x, s_y = intr.s_x, intr.s_y

    def model(theta, R, t, X, jac):
        return project_points(theta, s_x, s_y, R[vi], t[vi], X[pi], centers, jac=jac, lens_idx=lens)

    weight_scale = problem.robust_scale if problem.robust_scale and np.isfinite(problem.robust_scale) else 1.0
    constraints = [(c.point_a, c.point_b, c.distance, c.weight / weight_scale) for c in problem.scale_constraints]
    bundle = BundleProblem(model, obs.xy, vi, pi, len(problem.poses), len(problem.points),
                           problem.free_intrinsics, fixed_views=problem.fixed_views, constraints=constraints)
    q, t = stack_poses(problem.poses)
    state = BundleState(intr.to_vector(), q, t, problem.points.copy())
    return bundle, state


def _problem_from_state(problem, state):
    intr = PlenopticIntrinsics.from_vector(state.theta, problem.intrinsics.s_x, problem.intrinsics.s_y)
    return replace(problem, intrinsics=intr, poses=unstack_poses(state.quats, state.trans),
                   points=state.points.copy())


def residuals(problem):
    """All residuals ``pi_ML(G(xi_j) X_i, C_ML_k, Pi) - X_Rd`` as an (n, 2) array,
    plus the mask of records whose geometry is invalid at this iterate."""
    bundle, state = build_bundle(problem)
    _, r, invalid = bundle.evaluate(state, problem.robust_scale, jac=False)
    return r, invalid


def residual(problem, index):
    """Residual 2-vector (px) of observation record ``index``."""
    obs = problem.observations
    sub = replace(problem, observations=obs.subset(np.array([index])), scale_constraints=[])
    r, _ = residuals(sub)
    return r[0]


def evaluate_cost(problem):
    """Robust cost (Huber on each residual's norm, plus scale-constraint terms)
    and residual statistics."""
    bundle, state = build_bundle(problem)
    cost, r, invalid = bundle.evaluate(state, problem.robust_scale, jac=False)
    ok = ~invalid
    a = np.abs(r[ok]).ravel()
    sq = np.einsum("ni,ni->n", r, r)
    return cost, {
        "num_residuals": int(len(r)),
        "invalid": int(invalid.sum()),
        "sum_squared": float(sq[ok].sum()),
        "robust_cost_observations": float(huber(sq, problem.robust_scale)[0].sum()),
        "mean_abs_residual": float(a.mean()) if len(a) else float("nan"),
        "median_abs_residual": float(np.median(a)) if len(a) else float("nan"),
        "rms_residual": float(np.sqrt(np.mean(a ** 2))) if len(a) else float("nan"),
    }


def solve(problem, options=None):
    """Jointly refine intrinsics, poses and points; returns ``(problem, report)``."""
    options = options or SolveOptions(robust_scale=problem.robust_scale)
    if options.robust_scale != problem.robust_scale:
        problem = replace(problem, robust_scale=options.robust_scale)
    bundle, state = build_bundle(problem)
    state, report = solve_lm(bundle, state, options)
    return _problem_from_state(problem, state), report


def minimum_residual_count(problem):
    """Number of unknowns that must be matched by residual components."""
    nfree = int(problem.free_intrinsics.sum())
    nfree += 6 * (len(problem.poses) - len(problem.fixed_views)) + 3 * len(problem.points)
    return nfree
