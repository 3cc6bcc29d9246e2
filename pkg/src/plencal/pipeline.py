"""End-to-end calibration: clusters -> pinhole SfM -> plenoptic initialization
-> plenoptic bundle adjustment (with one residual-trimming pass)."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import sfm
from .ba import CalibrationProblem, residuals, solve
from .errors import NegativeParameter, NotConverged, PipelineFailure, PlencalError, RankDeficient
from .lm import SolveOptions
from .model import DistortionCoeffs, MicroLensGrid, PlenopticIntrinsics
from .plenoptic_init import (RECALIB_FIXED, constraint_tuple, depth_samples, fit_residual, image_distance,
                             init_B_bL0, metric_scale, screen_samples, search_scale, seed_plenoptic_problem)

log = logging.getLogger(__name__)


@dataclass
class CalibrationInput:
    grid: MicroLensGrid
    observations: object
    s_x: float = 0.0055
    s_y: float = 0.0055
    scale_constraints: list = field(default_factory=list)
    nominal: PlenopticIntrinsics | None = None
    nominal_f_L: float | None = None

    @classmethod
    def from_synthetic(cls, ds, constraints=True, nominal=None):
        return cls(ds.grid, ds.observations, ds.intrinsics_gt.s_x, ds.intrinsics_gt.s_y,
                   list(ds.scale_constraints) if constraints else [], nominal, ds.nominal_f_L)


@dataclass
class PipelineConfig:
    mode: str = "full"
    fixed: tuple = ()
    seed: int = 0
    refine_iterations: int = 2
    v_range: tuple = (1.5, 20.0)
    cluster_outlier_px: float = 1.0
    robust_scale: float = 1.0
    trim: bool = True
    trim_sigma: float = 5.0
    trim_min_px: float = 0.5
    sfm: sfm.SfmOptions = field(default_factory=sfm.SfmOptions)
    solve: SolveOptions = field(default_factory=SolveOptions)


@dataclass
class CalibrationResult:
    problem: CalibrationProblem
    report: object
    view_ids: np.ndarray  # original id of every calibrated pose
    point_ids: np.ndarray  # original id of every calibrated point
    pinhole: sfm.PinholeSolution
    initial: PlenopticIntrinsics
    scale: float
    dropped_points: list
    singular_clusters: int
    trimmed: int
    timings: dict
    warnings: list = field(default_factory=list)

    @property
    def intrinsics(self):
        return self.problem.intrinsics

    @property
    def poses(self):
        return self.problem.poses

    def poses_by_view(self):
        return {int(v): p for v, p in zip(self.view_ids, self.problem.poses)}


def _stage(name):
    class _Ctx:
        def __enter__(self):
            self.t0 = time.perf_counter()
            return self

        def __exit__(self, et, ev, tb):
            self.elapsed = time.perf_counter() - self.t0
            if ev is not None and isinstance(ev, (PlencalError, ValueError, np.linalg.LinAlgError)) \
                    and not isinstance(ev, PipelineFailure):
                raise PipelineFailure(name, str(ev)) from ev
            return False

    return _Ctx()


def _plenoptic_guess(sol, cm, inp, config, warnings):
    """Metric scale and ``(f_L, B, b_L0)`` guess from the current pinhole solution."""
    recalib = config.mode == "recalib"
    nominal = inp.nominal
    f_L = nominal.f_L if recalib else sol.f_px * inp.s_x
    z_rel, v = depth_samples(sol, cm)
    # constraints on points the SfM did not keep cannot fix the scale
    cons = [c for c in map(constraint_tuple, inp.scale_constraints) if np.isfinite(sol.points[list(c[:2])]).all()]
    if len(cons) < len(inp.scale_constraints):
        msg = f"plenoptic-init: {len(inp.scale_constraints) - len(cons)} scale constraint(s) on lost points ignored"
        if msg not in warnings:
            warnings.append(msg)
    if cons:
        scale = metric_scale(sol.points, cons).scale
    elif nominal is not None:
        # no metric reference in the scene: the scale follows from f_L and B
        sel = cm.num_lenses >= 3
        scale = search_scale(z_rel[sel], v[sel], f_L, nominal.B, config.v_range)
    else:
        raise ValueError("no scale constraints and no nominal B: metric scale is undetermined")
    z = z_rel * scale
    sel = (cm.num_lenses >= 3) & (v > config.v_range[0]) & (v < config.v_range[1])
    sel &= screen_samples(z, v, f_L)
    z, v = z[sel], v[sel]
    if recalib:
        B = nominal.B
        b_L0 = float(np.mean(image_distance(z, f_L) - v * B))
    else:
        try:
            B, b_L0 = init_B_bL0(z, v, f_L, config.v_range)
        except (NegativeParameter, RankDeficient) as exc:
            if nominal is None:
                raise
            warnings.append(f"plenoptic-init: {exc}; falling back to nominal B and b_L0")
            B, b_L0 = nominal.B, nominal.b_L0
    log.debug("guess f_L=%.6f B=%.6f b_L0=%.6f scale=%.6g misfit=%.3g", f_L, B, b_L0, scale,
              fit_residual(z, v, f_L, B, config.v_range))
    intr = PlenopticIntrinsics(f_L, min(b_L0, 0.999 * f_L), B, sol.c_x, sol.c_y, s_x=inp.s_x, s_y=inp.s_y)
    return intr, scale


def calibrate(inp: CalibrationInput, config: PipelineConfig | None = None):
    """Run the full pipeline; failures raise :class:`PipelineFailure` naming the stage."""
    config = config or PipelineConfig()
    if config.mode not in ("full", "recalib"):
        raise ValueError(f"unknown mode {config.mode!r}")
    if config.mode == "recalib" and inp.nominal is None:
        raise ValueError("recalibration mode needs nominal intrinsics")
    timings = {}
    warnings = []
    grid = inp.grid

    with _stage("sfm-init") as st:
        obs, dropped = inp.observations.filter_min_views(2)
        if not len(obs):
            raise PipelineFailure("sfm-init", "no point is observed in two views")
        num_points, num_views = obs.num_points, obs.num_views
        cm = sfm.virtual_track_centroids(obs, grid, None, config.cluster_outlier_px)
        tracks = sfm.Tracks.from_clusters(cm, cm.xy, num_points, num_views)
        if inp.nominal is not None:
            f0, c0 = inp.nominal.f_L / inp.s_x, inp.nominal.principal
        else:
            f0 = inp.nominal_f_L / inp.s_x if inp.nominal_f_L else 1.2 * max(grid.sensor_width, grid.sensor_height)
            c0 = np.array([grid.sensor_width / 2.0, grid.sensor_height / 2.0])
        sol = sfm.reconstruct(tracks, f0, c0, replace(config.sfm, seed=config.seed))
    timings["sfm-init"] = st.elapsed

    with _stage("plenoptic-init") as st:
        ba_opts = SolveOptions(max_iter=config.sfm.final_max_iter, robust_scale=config.sfm.robust_scale,
                               compute_covariance=False)
        for it in range(config.refine_iterations + 1):
            guess, scale = _plenoptic_guess(sol, cm, inp, config, warnings)
            if it == config.refine_iterations:
                break
            cm = sfm.virtual_track_centroids(obs, grid, guess, config.cluster_outlier_px)
            new_tracks = sfm.Tracks.from_clusters(cm, sfm.pinhole_measurements(cm, guess), num_points, num_views)
            sol = sfm.retrack(sol, tracks, new_tracks)
            tracks = new_tracks
            try:
                sol, _ = sfm.pinhole_ba(sol, tracks, ba_opts, config.sfm.robust_scale)
            except NotConverged as exc:
                sol = exc.solution
            sol = sfm.reject_outliers(sol, tracks, 3 * config.sfm.final_threshold)
        # observations of clusters rejected by the cluster fit or by the pinhole model stay out
        good_pair = np.zeros((num_points, num_views), dtype=bool)
        usable = sol.usable(tracks)
        good_pair[tracks.point[usable], tracks.view[usable]] = True
        keep = cm.obs_inlier & good_pair[obs.point_ids, obs.view_ids]
        metric = sol.scaled(scale)
        problem, view_ids, point_ids = seed_plenoptic_problem(
            metric, guess.B, guess.b_L0, obs.subset(keep), grid, inp.s_x, inp.s_y, inp.scale_constraints,
            config.mode, inp.nominal, config.fixed, config.robust_scale)
    timings["plenoptic-init"] = st.elapsed
    initial = problem.intrinsics

    with _stage("ba") as st:
        options = replace(config.solve, robust_scale=config.robust_scale)
        problem, report = solve(problem, options)
        trimmed = 0
        if config.trim:
            r, invalid = residuals(problem)
            sigma = 1.4826 * float(np.median(np.abs(r[~invalid])))
            thr = max(config.trim_min_px, config.trim_sigma * sigma)
            bad = invalid | (np.linalg.norm(r, axis=1) > thr)
            trimmed = int(bad.sum())
            if trimmed:
                problem = replace(problem, observations=problem.observations.subset(~bad))
                problem, report = solve(problem, options)
    timings["ba"] = st.elapsed
    return CalibrationResult(problem, report, view_ids, point_ids, sol, initial, scale, dropped, len(cm.singular),
                             trimmed, timings, warnings)
