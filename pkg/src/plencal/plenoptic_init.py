"""Initial plenoptic parameters from a pinhole reconstruction: metric scale,
the linear fit of ``b_L = v * B + b_L0`` and the seeded calibration problem."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .ba import CalibrationProblem
from .data import ObservationSet, ScaleConstraint
from .errors import NegativeParameter, RankDeficient, ZeroBaseline
from .model import DistortionCoeffs, PlenopticIntrinsics

log = logging.getLogger(__name__)

RECALIB_FIXED = frozenset({"f_L", "B"})


def constraint_tuple(c):
    if isinstance(c, ScaleConstraint):
        return c.point_a, c.point_b, c.distance, c.weight
    a, b, d = c[:3]
    return int(a), int(b), float(d), float(c[3]) if len(c) > 3 else 1.0


@dataclass
class ScaleResult:
    scale: float
    residuals: np.ndarray  # scaled distance minus target (mm), per constraint


def metric_scale(points, constraints):
    """Weighted geometric mean of ``distance / current_distance``."""
    cons = [constraint_tuple(c) for c in constraints]
    if not cons:
        raise ValueError("at least one scale constraint is required")
    logs, ws, cur = [], [], []
    for a, b, d, w in cons:
        dist = float(np.linalg.norm(points[a] - points[b]))
        if not np.isfinite(dist):
            raise ValueError(f"scale constraint ({a}, {b}) refers to an unreconstructed point")
        if dist < 1e-9:
            raise ZeroBaseline(f"points {a} and {b} coincide")
        logs.append(np.log(d / dist))
        ws.append(w)
        cur.append(dist)
    ws = np.asarray(ws)
    s = float(np.exp(np.sum(ws * np.asarray(logs)) / np.sum(ws)))
    res = s * np.asarray(cur) - np.array([c[2] for c in cons])
    return ScaleResult(s, res)


def apply_metric_scale(solution, constraints):
    """Scale a pinhole solution to millimeters; returns ``(scaled, ScaleResult)``."""
    r = metric_scale(solution.points, constraints)
    return solution.scaled(r.scale), r


def image_distance(z_C, f_L):
    """Thin-lens image distance for object distances ``z_C`` (array)."""
    z_C = np.asarray(z_C, dtype=float)
    return 1.0 / (1.0 / f_L - 1.0 / z_C)


def _select(z_C, v, f_L, v_range):
    z_C = np.asarray(z_C, dtype=float).reshape(-1)
    v = np.asarray(v, dtype=float).reshape(-1)
    ok = np.isfinite(z_C) & np.isfinite(v) & (z_C > f_L) & (v > v_range[0]) & (v < v_range[1])
    return z_C[ok], v[ok]


def init_B_bL0(z_C, v, f_L, v_range=(1.5, 20.0)):
    """Least-squares ``(B, b_L0)`` from metric depths and virtual depths.

    Each sample contributes ``b_L(z_C) = v * B + b_L0``; samples with
    ``z_C <= f_L`` or ``v`` outside ``v_range`` are ignored. The 2x2 normal
    equations are solved directly.
    """
    if not f_L > 0:
        raise ValueError("f_L must be positive")
    z, vv = _select(z_C, v, f_L, v_range)
    return solve_B_bL0(image_distance(z, f_L), vv)


def solve_B_bL0(b_L, v):
    """Normal-equation solution of ``b_L = v * B + b_L0`` for given image
    distances (no sample selection)."""
    b = np.asarray(b_L, dtype=float).reshape(-1)
    vv = np.asarray(v, dtype=float).reshape(-1)
    if len(vv) < 2 or np.ptp(vv) <= 1e-9:
        raise RankDeficient("virtual depths do not vary: the design matrix has rank 1")
    V = np.column_stack([vv, np.ones_like(vv)])
    N = V.T @ V
    B, b_L0 = np.linalg.solve(N, V.T @ b)
    if not (B > 0 and b_L0 > 0):
        raise NegativeParameter(f"least-squares fit gave B={B:.6g}, b_L0={b_L0:.6g}")
    return float(B), float(b_L0)


def fit_residual(z_C, v, f_L, B=None, v_range=(1.5, 20.0)):
    """RMS of ``b_L - v * B - b_L0`` after fitting ``b_L0`` (and ``B`` if None)."""
    z, vv = _select(z_C, v, f_L, v_range)
    b = image_distance(z, f_L)
    if B is None:
        V = np.column_stack([vv, np.ones_like(vv)])
        x, *_ = np.linalg.lstsq(V, b, rcond=None)
        r = b - V @ x
    else:
        r = b - vv * B
        r = r - r.mean()
    return float(np.sqrt(np.mean(r * r)))


def screen_samples(z_C, v, f_L, k=3.0, rounds=3):
    """Mask of depth samples consistent with a common line ``v(b_L)``.

    Virtual depths carry the noise, so the screening line regresses ``v`` on
    the image distance and drops samples whose ``v`` residual exceeds ``k``
    robust standard deviations.
    """
    z_C = np.asarray(z_C, dtype=float)
    v = np.asarray(v, dtype=float)
    keep = np.isfinite(z_C) & np.isfinite(v) & (z_C > f_L)
    b = np.where(keep, image_distance(np.where(keep, z_C, 2 * f_L), f_L), 0.0)
    for _ in range(rounds):
        if keep.sum() < 3:
            break
        A = np.column_stack([b[keep], np.ones(keep.sum())])
        (slope, icpt), *_ = np.linalg.lstsq(A, v[keep], rcond=None)
        r = np.abs(v - (slope * b + icpt))
        s = 1.4826 * float(np.median(r[keep]))
        if s <= 0:
            break
        keep &= r < k * s
    return keep


def search_scale(z_rel, v, f_L, B, v_range=(1.5, 20.0), samples=200):
    """Metric scale of relative depths ``z_rel`` from a known ``f_L`` and ``B``.

    For every candidate scale ``s``, ``b_L0`` is the median of
    ``b_L(s * z) - v * B`` and the misfit is the median absolute deviation
    around it; the best scale on a coarse log grid is refined with bounded
    Brent.
    """
    z_rel = np.asarray(z_rel, dtype=float)
    v = np.asarray(v, dtype=float)
    ok = np.isfinite(z_rel) & (z_rel > 0) & np.isfinite(v) & (v > v_range[0]) & (v < v_range[1])
    z_rel, v = z_rel[ok], v[ok]
    if len(v) < 2 or np.ptp(v) <= 1e-9:
        raise RankDeficient("virtual depths do not vary")
    lo = np.log(f_L / np.min(z_rel)) + 1e-6
    hi = lo + np.log(1e5)

    def cost(ls):
        r = image_distance(np.exp(ls) * z_rel, f_L) - v * B
        return float(np.median(np.abs(r - np.median(r))))

    grid = np.linspace(lo, hi, samples)
    vals = np.array([cost(g) for g in grid])
    k = int(np.argmin(vals))
    a, b = grid[max(k - 1, 0)], grid[min(k + 1, samples - 1)]
    res = minimize_scalar(cost, bounds=(a, b), method="bounded", options={"xatol": 1e-12})
    return float(np.exp(res.x))


def depth_samples(solution, clusters, scale=1.0):
    """Camera-frame depth ``z_C`` (scaled) and virtual depth of every cluster
    whose point and view are reconstructed."""
    reg = solution.registered
    tri = solution.triangulated
    ok = reg[clusters.view] & tri[clusters.point]
    z = np.full(len(clusters), np.nan)
    idx = np.flatnonzero(ok)
    for j in np.unique(clusters.view[idx]):
        rows = idx[clusters.view[idx] == j]
        z[rows] = solution.poses[j].transform(solution.points[clusters.point[rows]])[:, 2]
    return z * scale, clusters.v


def seed_plenoptic_problem(solution, B, b_L0, observations, grid, s_x, s_y, scale_constraints=(),
                           mode="full", nominal=None, fixed=(), robust_scale=1.0):
    """Calibration problem seeded from a metric pinhole solution.

    ``f_L = f_px * s_x`` and the principal point come from the pinhole model,
    distortion starts at zero. Recalibration mode fixes ``f_L`` and ``B`` at
    the nominal values. Views and points are renumbered densely in the order
    of their original ids; the returned maps give the original ids.
    """
    fixed = set(fixed)
    f_L = solution.f_px * s_x
    if mode == "recalib":
        if nominal is None:
            raise ValueError("recalibration mode needs nominal f_L and B")
        fixed |= RECALIB_FIXED
    elif mode != "full":
        raise ValueError(f"unknown mode {mode!r}")
    values = {"f_L": f_L, "b_L0": b_L0, "B": B, "c_x": solution.c_x, "c_y": solution.c_y}
    if nominal is not None:
        for name in fixed & set(values):
            values[name] = getattr(nominal, name)
        kp = nominal.distortion.as_array() * [n in fixed for n in ("k0", "k1", "k2", "p0", "p1")]
    else:
        kp = np.zeros(5)
    if not values["b_L0"] < values["f_L"]:
        raise NegativeParameter(f"initial b_L0={values['b_L0']:.6g} is not below f_L={values['f_L']:.6g}")
    intr = PlenopticIntrinsics(values["f_L"], values["b_L0"], values["B"], values["c_x"], values["c_y"],
                               s_x=s_x, s_y=s_y, distortion=DistortionCoeffs.from_array(kp))

    views = np.flatnonzero(solution.registered)
    pts = np.flatnonzero(solution.triangulated)
    vmap = -np.ones(len(solution.poses), dtype=np.int64)
    vmap[views] = np.arange(len(views))
    pmap = -np.ones(len(solution.points), dtype=np.int64)
    pmap[pts] = np.arange(len(pts))
    o = observations
    keep = (o.view_ids < len(vmap)) & (o.point_ids < len(pmap))
    keep[keep] = (vmap[o.view_ids[keep]] >= 0) & (pmap[o.point_ids[keep]] >= 0)
    obs = ObservationSet(pmap[o.point_ids[keep]], vmap[o.view_ids[keep]], o.lens_ids[keep], o.xy[keep], check=False)
    cons = []
    for c in scale_constraints:
        a, b, d, w = constraint_tuple(c)
        if pmap[a] >= 0 and pmap[b] >= 0:
            cons.append(ScaleConstraint(int(pmap[a]), int(pmap[b]), d, w))
        else:
            log.warning("scale constraint (%d, %d) dropped: point not reconstructed", a, b)
    pose_fix = {f for f in fixed if f.startswith("pose_")}
    fixed = (fixed - pose_fix) | {f"pose_{vmap[int(f[5:])]}" for f in pose_fix if vmap[int(f[5:])] >= 0}
    problem = CalibrationProblem(intr, grid, [solution.poses[j] for j in views], solution.points[pts], obs,
                                 cons, fixed=fixed, robust_scale=robust_scale)
    return problem, views, pts
