"""Sparse Levenberg-Marquardt for bundle adjustment with a Schur complement.

The solver is model-agnostic: a *projection model* maps the current state
(intrinsics vector, per-view rotations/translations, points) to predicted
2-D measurements for every observation, together with the Jacobian blocks
w.r.t. intrinsics (k columns), the left pose perturbation (6 columns) and the
point (3 columns). Residuals are ``pred - measured``.

Point blocks are eliminated; points that take part in distance constraints
are kept in the reduced system since those residuals couple two points.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse

from .errors import Diverged, SingularSystem
from .geometry import quat_to_matrix, rotate_left

log = logging.getLogger(__name__)

INVALID_RESIDUAL = 1e3
_CHUNK = 65536


@dataclass
class SolveOptions:
    max_iter: int = 100
    gradient_tol: float = 1e-10
    param_tol: float = 1e-12
    function_tol: float = 1e-9
    robust_scale: float | None = 1.0
    initial_damping: float = 1e-4
    max_consecutive_rejects: int = 25
    max_damping: float = 1e16
    compute_covariance: bool = True


@dataclass
class IterationRecord:
    cost: float
    damping: float
    step_norm: float
    accepted: bool


@dataclass
class SolveReport:
    iterations: int = 0
    initial_cost: float = float("nan")
    final_cost: float = float("nan")
    history: list = field(default_factory=list)
    mean_abs_residual: float = float("nan")
    median_abs_residual: float = float("nan")
    termination: str = ""
    invalid_residuals: int = 0
    covariance_diag: np.ndarray | None = None

    def to_dict(self):
        return {
            "iterations": self.iterations,
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "mean_abs_residual_px": self.mean_abs_residual,
            "median_abs_residual_px": self.median_abs_residual,
            "termination": self.termination,
            "invalid_residuals": self.invalid_residuals,
            "history": [
                {"cost": h.cost, "damping": h.damping, "step_norm": h.step_norm, "accepted": h.accepted}
                for h in self.history
            ],
        }


@dataclass
class BundleState:
    theta: np.ndarray
    quats: np.ndarray
    trans: np.ndarray
    points: np.ndarray

    def copy(self):
        return BundleState(self.theta.copy(), self.quats.copy(), self.trans.copy(), self.points.copy())


def huber(sq_norm, scale):
    """Robust cost ``rho(s^2)`` and IRLS weight ``rho'(s^2)`` per residual block."""
    if scale is None or not np.isfinite(scale):
        return sq_norm, np.ones_like(sq_norm)
    s = np.sqrt(sq_norm)
    inlier = s <= scale
    rho = np.where(inlier, sq_norm, 2 * scale * s - scale * scale)
    w = np.where(inlier, 1.0, scale / np.maximum(s, 1e-300))
    return rho, w


class Segments:
    """Contiguous row segments starting at ``starts`` within ``n`` rows.

    Sums are products with sparse 0/1 indicator blocks, one block per chunk of
    whole segments, which is much faster than ``ufunc.reduceat`` on stacked
    small matrices and keeps a fixed summation order.
    """

    def __init__(self, starts, n, chunk=_CHUNK):
        starts = np.asarray(starts, dtype=np.int64)
        self.num = len(starts)
        self.blocks = []
        bounds = np.append(starts, n)
        counts = np.diff(bounds)
        s = 0
        while s < self.num:
            e = int(np.searchsorted(bounds, bounds[s] + chunk, side="right")) - 1
            e = min(max(e, s + 1), self.num)
            lo, hi = int(bounds[s]), int(bounds[e])
            seg = np.repeat(np.arange(e - s), counts[s:e])
            S = scipy.sparse.csr_matrix((np.ones(hi - lo), (seg, np.arange(hi - lo))), shape=(e - s, hi - lo))
            self.blocks.append((s, e, lo, hi, S))
            s = e

    def sum(self, values):
        out = np.zeros((self.num,) + values.shape[1:])
        flat = out.reshape(self.num, -1)
        for s, e, lo, hi, S in self.blocks:
            flat[s:e] = S @ values[lo:hi].reshape(hi - lo, -1)
        return out

    def outer_sum(self, A, B):
        """Per-segment ``sum A_n^T B_n`` for stacks ``A`` (n, m, a), ``B`` (n, m, b)."""
        out = np.zeros((self.num, A.shape[2], B.shape[2]))
        flat = out.reshape(self.num, -1)
        for s, e, lo, hi, S in self.blocks:
            prod = np.matmul(A[lo:hi].transpose(0, 2, 1), B[lo:hi])
            flat[s:e] = S @ prod.reshape(hi - lo, -1)
        return out


class BundleProblem:
    """Least-squares bundle problem in the generic state layout.

    ``model(theta, R, t, points, jac)`` returns ``(pred, valid, J_intr,
    J_pose, J_point)`` for every observation in the order of ``view_idx`` and
    ``point_idx``; observations must be sorted by point and then view.
    ``constraints`` is a list of ``(a, b, distance, weight)`` point-pair
    residuals ``weight * (|X_a - X_b| - distance)``.
    """

    def __init__(self, model, measured, view_idx, point_idx, num_views, num_points, free_intr,
                 fixed_views=(0,), frozen_coords=None, constraints=()):
        self.model = model
        self.measured = np.asarray(measured, dtype=float)
        self.view_idx = np.asarray(view_idx, dtype=np.int64)
        self.point_idx = np.asarray(point_idx, dtype=np.int64)
        self.num_views = num_views
        self.num_points = num_points
        self.free_intr = np.flatnonzero(np.asarray(free_intr, dtype=bool))
        self.n_intr = len(np.asarray(free_intr))
        fixed = np.zeros(num_views, dtype=bool)
        fixed[list(fixed_views)] = True
        self.free_views = np.flatnonzero(~fixed)
        self.frozen = np.zeros((num_points, 3), dtype=bool) if frozen_coords is None else np.asarray(frozen_coords)
        self.constraints = [(int(a), int(b), float(d), float(w)) for a, b, d, w in constraints]

        # camera-side layout: free intrinsics, free poses, constrained points
        kf = len(self.free_intr)
        self.pose_col = -np.ones(num_views, dtype=np.int64)
        self.pose_col[self.free_views] = kf + 6 * np.arange(len(self.free_views))
        cpts = sorted({a for a, _, _, _ in self.constraints} | {b for _, b, _, _ in self.constraints})
        self.cpoint_col = -np.ones(num_points, dtype=np.int64)
        base = kf + 6 * len(self.free_views)
        self.cpoint_col[cpts] = base + 3 * np.arange(len(cpts))
        self.n_cam = base + 3 * len(cpts)
        self.elim_points = np.setdiff1d(np.arange(num_points), cpts)
        self.elim_index = -np.ones(num_points, dtype=np.int64)
        self.elim_index[self.elim_points] = np.arange(len(self.elim_points))

        in_dense = self.cpoint_col[self.point_idx] >= 0
        self.dense_obs = np.flatnonzero(in_dense)
        self.reg_obs = np.flatnonzero(~in_dense)
        rp = self.point_idx[self.reg_obs]
        rv = self.view_idx[self.reg_obs]
        if len(rp) > 1 and np.any((np.diff(rp) < 0) | ((np.diff(rp) == 0) & (np.diff(rv) < 0))):
            raise ValueError("observations must be sorted by (point, view)")
        change = np.ones(len(rp), dtype=bool)
        change[1:] = (rp[1:] != rp[:-1]) | (rv[1:] != rv[:-1])
        self.pair_starts = np.flatnonzero(change)
        self.pair_point = rp[self.pair_starts]
        self.pair_view = rv[self.pair_starts]
        pchange = np.ones(len(self.pair_starts), dtype=bool)
        pchange[1:] = self.pair_point[1:] != self.pair_point[:-1]
        self.point_pair_starts = np.flatnonzero(pchange)
        self.point_of_segment = self.pair_point[self.point_pair_starts]
        self.pair_segments = Segments(self.pair_starts, len(rp))
        self.point_segments = Segments(self.point_pair_starts, len(self.pair_starts))
        self.view_order = np.argsort(rv, kind="stable")
        self.view_bounds = np.searchsorted(rv[self.view_order], np.arange(num_views + 1))

    # --- evaluation --------------------------------------------------------

    def evaluate(self, state, robust_scale, jac=True):
        R = quat_to_matrix(state.quats)
        out = self.model(state.theta, R, state.trans, state.points, jac)
        pred, valid = out[0], out[1]
        r = pred - self.measured
        invalid = ~valid | ~np.all(np.isfinite(r), axis=1)
        r[invalid] = [INVALID_RESIDUAL, 0.0]
        sq = np.einsum("ni,ni->n", r, r)
        rho, w = huber(sq, robust_scale)
        cost = float(np.sum(rho))
        cres = self._constraint_residuals(state.points)
        cost += float(np.sum(cres ** 2))
        if not jac:
            return cost, r, invalid
        Ji, Jp, Jx = out[2], out[3], out[4]
        sw = np.sqrt(w)
        sw[invalid] = 0.0
        return cost, r, invalid, (sw, Ji, Jp, Jx)

    def _constraint_residuals(self, points):
        if not self.constraints:
            return np.zeros(0)
        return np.array([w * (np.linalg.norm(points[a] - points[b]) - d) for a, b, d, w in self.constraints])

    def _constraint_jacobian(self, points):
        rows = np.zeros((len(self.constraints), self.n_cam))
        for i, (a, b, d, w) in enumerate(self.constraints):
            diff = points[a] - points[b]
            u = diff / max(np.linalg.norm(diff), 1e-300)
            ca, cb = self.cpoint_col[a], self.cpoint_col[b]
            rows[i, ca:ca + 3] += w * u * ~self.frozen[a]
            rows[i, cb:cb + 3] -= w * u * ~self.frozen[b]
        return rows

    # --- normal equations --------------------------------------------------

    def normal_equations(self, state, r, jacs):
        """Assemble ``A`` (camera side), ``W`` (camera x eliminated points),
        point blocks ``V`` and gradients for the IRLS-weighted problem."""
        sw, Ji, Jp, Jx = jacs
        kf = len(self.free_intr)
        nc = self.n_cam
        ne = len(self.elim_points)
        A = np.zeros((nc, nc))
        gc = np.zeros(nc)
        V = np.zeros((ne, 3, 3))
        gp = np.zeros((ne, 3))
        W = np.zeros((nc, ne, 3))

        idx = self.reg_obs
        if len(idx) == len(r):
            idx = slice(None)
        s = sw[idx][:, None, None]
        Jiw = (Ji[idx] if kf == Ji.shape[2] else Ji[idx][:, :, self.free_intr]) * s
        Jpw = Jp[idx] * s
        Jxw = Jx[idx] * s
        if self.frozen.any():
            Jxw *= ~self.frozen[self.point_idx[idx]][:, None, :]
        rw = r[idx] * sw[idx][:, None]

        if kf:
            flat = Jiw.reshape(-1, kf)
            A[:kf, :kf] += flat.T @ flat
            gc[:kf] += flat.T @ rw.reshape(-1)
        # gather once in view order so every view is a contiguous slice
        Jps = Jpw[self.view_order].reshape(-1, 6)
        rws = rw[self.view_order].reshape(-1)
        Jis = Jiw[self.view_order].reshape(-1, kf) if kf else None
        for j in self.free_views:
            lo, hi = 2 * self.view_bounds[j], 2 * self.view_bounds[j + 1]
            if hi == lo:
                continue
            pc = self.pose_col[j]
            Pj = Jps[lo:hi]
            A[pc:pc + 6, pc:pc + 6] += Pj.T @ Pj
            gc[pc:pc + 6] += Pj.T @ rws[lo:hi]
            if kf:
                cross = Jis[lo:hi].T @ Pj
                A[:kf, pc:pc + 6] += cross
                A[pc:pc + 6, :kf] += cross.T

        if len(self.reg_obs):
            # one record per (point, view) pair needs no pair-level reduction
            single = len(self.pair_starts) == len(self.reg_obs)
            Jcam = np.concatenate([Jiw, Jpw], axis=2)
            if single:
                pair_cam = np.matmul(Jcam.transpose(0, 2, 1), Jxw)
                pair_V = np.matmul(Jxw.transpose(0, 2, 1), Jxw)
            else:
                pair_cam = self.pair_segments.outer_sum(Jcam, Jxw)
                pair_V = self.pair_segments.outer_sum(Jxw, Jxw)
            pair_g = Jxw[:, 0, :] * rw[:, 0, None] + Jxw[:, 1, :] * rw[:, 1, None]
            if not single:
                pair_g = self.pair_segments.sum(pair_g)
            segs = self.point_segments
            ei = self.elim_index[self.point_of_segment]
            V[ei] = segs.sum(pair_V)
            gp[ei] = segs.sum(pair_g)
            if kf:
                W[:kf, ei, :] = segs.sum(pair_cam[:, :kf, :]).transpose(1, 0, 2)
            pcols = self.pose_col[self.pair_view]
            free_pair = pcols >= 0
            pe = self.elim_index[self.pair_point[free_pair]]
            pcf = pcols[free_pair]
            blocks = pair_cam[free_pair, kf:, :]
            for a in range(6):
                W[pcf + a, pe, :] = blocks[:, a, :]

        if len(self.dense_obs) or self.constraints:
            Jd, rd = self._dense_rows(self.dense_obs, r, jacs, state)
            A += Jd.T @ Jd
            gc += Jd.T @ rd
        return A, gc, V, gp, W

    def _dense_rows(self, obs, r, jacs, state):
        """Explicit Jacobian rows over the camera-side vector for observations
        of constrained points, plus the constraint residual rows."""
        sw, Ji, Jp, Jx = jacs
        kf = len(self.free_intr)
        m = len(obs)
        J = np.zeros((m, 2, self.n_cam))
        s = sw[obs][:, None, None]
        J[:, :, :kf] = Ji[obs][:, :, self.free_intr] * s
        pcs = self.pose_col[self.view_idx[obs]]
        for n in np.flatnonzero(pcs >= 0):
            J[n, :, pcs[n]:pcs[n] + 6] = Jp[obs[n]] * s[n]
        cps = self.cpoint_col[self.point_idx[obs]]
        for n in range(m):
            J[n, :, cps[n]:cps[n] + 3] = Jx[obs[n]] * s[n] * ~self.frozen[self.point_idx[obs[n]]]
        rows = J.reshape(-1, self.n_cam)
        res = (r[obs] * sw[obs][:, None]).reshape(-1)
        if self.constraints:
            rows = np.vstack([rows, self._constraint_jacobian(state.points)])
            res = np.concatenate([res, self._constraint_residuals(state.points)])
        return rows, res

    def dense_jacobian(self, state, r, jacs):
        """Full weighted Jacobian over [camera-side, eliminated points] and the
        matching residual vector; used as a brute-force oracle on small problems."""
        sw, Ji, Jp, Jx = jacs
        nc = self.n_cam
        ne = len(self.elim_points)
        n = len(r)
        J = np.zeros((n, 2, nc + 3 * ne))
        kf = len(self.free_intr)
        s = sw[:, None, None]
        J[:, :, :kf] = Ji[:, :, self.free_intr] * s
        for o in range(n):
            pc = self.pose_col[self.view_idx[o]]
            if pc >= 0:
                J[o, :, pc:pc + 6] = Jp[o] * s[o]
            p = self.point_idx[o]
            col = self.cpoint_col[p] if self.cpoint_col[p] >= 0 else nc + 3 * self.elim_index[p]
            J[o, :, col:col + 3] = Jx[o] * s[o] * ~self.frozen[p]
        rows = J.reshape(-1, nc + 3 * ne)
        res = (r * sw[:, None]).reshape(-1)
        if self.constraints:
            cj = np.zeros((len(self.constraints), nc + 3 * ne))
            cj[:, :nc] = self._constraint_jacobian(state.points)
            rows = np.vstack([rows, cj])
            res = np.concatenate([res, self._constraint_residuals(state.points)])
        return rows, res

    # --- step computation ----------------------------------------------------

    def schur_step(self, A, gc, V, gp, W, damping):
        """Solve ``(H + damping * diag(H)) delta = -g`` by eliminating points."""
        dA = np.diag(A).copy()
        Ad = A + np.diag(damping * dA)
        ne = len(V)
        Vd = V.copy()
        dV = np.einsum("nii->ni", V)
        Vd[:, np.arange(3), np.arange(3)] += damping * dV
        # frozen or unobserved coordinates: unit diagonal, zero update
        dead = np.einsum("nii->ni", Vd) <= 0
        Vd[:, np.arange(3), np.arange(3)] += dead
        Vinv = np.linalg.inv(Vd) if ne else Vd
        nc = len(gc)
        Wm = W.reshape(nc, 3 * ne)
        Y = np.matmul(W.transpose(1, 0, 2), Vinv).transpose(1, 0, 2).reshape(nc, 3 * ne)
        S = Ad - Y @ Wm.T
        rhs = -gc + Y @ gp.reshape(-1)
        dc = _solve_spd(S, rhs)
        b = gp + (dc @ Wm).reshape(ne, 3)
        dp = -np.matmul(Vinv, b[:, :, None])[:, :, 0]
        return dc, dp

    def apply_step(self, state, dc, dp):
        new = state.copy()
        kf = len(self.free_intr)
        new.theta[self.free_intr] += dc[:kf]
        if len(self.free_views):
            d = dc[kf:kf + 6 * len(self.free_views)].reshape(-1, 6)
            new.quats[self.free_views] = rotate_left(state.quats[self.free_views], d[:, :3])
            new.trans[self.free_views] += d[:, 3:]
        cp = np.flatnonzero(self.cpoint_col >= 0)
        for p in cp:
            c = self.cpoint_col[p]
            new.points[p] += dc[c:c + 3] * ~self.frozen[p]
        new.points[self.elim_points] += dp * ~self.frozen[self.elim_points]
        return new

    def dense_step(self, state, r, jacs, damping):
        """Same step as :meth:`schur_step` from the full dense normal equations."""
        J, res = self.dense_jacobian(state, r, jacs)
        H = J.T @ J
        g = J.T @ res
        d = np.diag(H).copy()
        H[np.diag_indices_from(H)] += damping * d + (d <= 0)
        x = np.linalg.solve(H, -g)
        nc = self.n_cam
        return x[:nc], x[nc:].reshape(-1, 3)

    def state_norm(self, state):
        parts = [state.theta[self.free_intr], state.trans[self.free_views].ravel(), state.points.ravel()]
        return float(np.sqrt(sum(float(np.dot(p, p)) for p in parts)))


def _solve_spd(S, rhs):
    d = np.sqrt(np.abs(np.diag(S)))
    d[d == 0] = 1.0
    Ss = S / d[:, None] / d[None, :]
    try:
        c = scipy.linalg.cho_factor(Ss, lower=True, check_finite=False)
        x = scipy.linalg.cho_solve(c, rhs / d, check_finite=False)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SingularSystem(str(exc)) from exc
    if not np.all(np.isfinite(x)):
        raise SingularSystem("non-finite step")
    return x / d


def solve_lm(problem: BundleProblem, state: BundleState, options: SolveOptions | None = None):
    """Run Levenberg-Marquardt from ``state``; returns ``(state, report)``.

    Damping follows the Marquardt form ``H + lambda * diag(H)``; lambda is
    divided by 3 after an accepted step and doubled after a rejected one.
    Stops on the max-norm of the gradient, the relative step length, a relative cost
    decrease below ``function_tol`` on an accepted step, or ``max_iter``.
    """
    options = options or SolveOptions()
    delta = options.robust_scale
    report = SolveReport()
    cost, r, invalid, jacs = problem.evaluate(state, delta)
    report.initial_cost = cost
    lam = options.initial_damping
    rejects = 0
    termination = "max_iterations"
    it = 0
    if cost == 0.0:
        termination = "zero_cost"
    else:
        A, gc, V, gp, W = problem.normal_equations(state, r, jacs)
        while it < options.max_iter:
            if _max_gradient(gc, gp) < options.gradient_tol:
                termination = "gradient_tolerance"
                break
            it += 1
            try:
                dc, dp = problem.schur_step(A, gc, V, gp, W, lam)
            except SingularSystem:
                lam *= 2.0
                report.history.append(IterationRecord(cost, lam, float("nan"), False))
                if lam > options.max_damping:
                    raise
                continue
            step_norm = float(np.sqrt(dc @ dc + np.sum(dp * dp)))
            if step_norm <= options.param_tol * (problem.state_norm(state) + options.param_tol):
                report.history.append(IterationRecord(cost, lam, step_norm, False))
                termination = "parameter_tolerance"
                break
            cand = problem.apply_step(state, dc, dp)
            new_cost, _, _ = problem.evaluate(cand, delta, jac=False)
            if np.isfinite(new_cost) and new_cost < cost:
                small = cost - new_cost <= options.function_tol * cost
                state = cand
                cost = new_cost
                lam = max(lam / 3.0, 1e-12)
                rejects = 0
                report.history.append(IterationRecord(cost, lam, step_norm, True))
                log.debug("iter %d cost %.6e lambda %.2e", it, cost, lam)
                if cost == 0.0:
                    termination = "zero_cost"
                    break
                if small:
                    termination = "function_tolerance"
                    break
                cost, r, invalid, jacs = problem.evaluate(state, delta)
                A, gc, V, gp, W = problem.normal_equations(state, r, jacs)
            else:
                lam *= 2.0
                rejects += 1
                report.history.append(IterationRecord(cost, lam, step_norm, False))
                if rejects >= options.max_consecutive_rejects:
                    report.termination = "diverged"
                    _finish(problem, state, report, options, delta, it)
                    exc = Diverged(f"no accepted step in {rejects} consecutive attempts")
                    exc.state, exc.report = state, report
                    raise exc
                if lam > options.max_damping:
                    raise SingularSystem("damping exceeded its maximum")
    report.termination = termination
    _finish(problem, state, report, options, delta, it)
    return state, report


def _max_gradient(gc, gp):
    """Largest gradient component (max norm), as in common sparse solvers."""
    m = float(np.max(np.abs(gc))) if len(gc) else 0.0
    if len(gp):
        m = max(m, float(np.max(np.abs(gp))))
    return m


def _finish(problem, state, report, options, delta, it):
    cost, r, invalid, jacs = problem.evaluate(state, delta)
    report.iterations = it
    report.final_cost = cost
    ok = ~invalid
    report.invalid_residuals = int(invalid.sum())
    absr = np.abs(r[ok]).ravel()
    report.mean_abs_residual = float(absr.mean()) if len(absr) else float("nan")
    report.median_abs_residual = float(np.median(absr)) if len(absr) else float("nan")
    if options.compute_covariance:
        try:
            A, gc, V, gp, W = problem.normal_equations(state, r, jacs)
            nc = problem.n_cam
            S = _reduced_matrix(problem, A, V, W)
            dof = max(2 * int(ok.sum()) - nc - 3 * len(V), 1)
            sigma2 = cost / dof
            d = np.sqrt(np.abs(np.diag(S)))
            d[d == 0] = 1.0
            inv = np.linalg.inv(S / d[:, None] / d[None, :]) / d[:, None] / d[None, :]
            kf = len(problem.free_intr)
            cov = np.full(problem.n_intr, 0.0)
            cov[problem.free_intr] = np.diag(inv)[:kf] * sigma2
            report.covariance_diag = cov
        except (np.linalg.LinAlgError, SingularSystem):
            report.covariance_diag = None
    return report


def _reduced_matrix(problem, A, V, W):
    ne = len(V)
    nc = problem.n_cam
    Vd = V.copy()
    dead = np.einsum("nii->ni", Vd) <= 0
    Vd[:, np.arange(3), np.arange(3)] += dead
    Vinv = np.linalg.inv(Vd) if ne else Vd
    Y = np.matmul(W.transpose(1, 0, 2), Vinv).transpose(1, 0, 2).reshape(nc, 3 * ne)
    return A - Y @ W.reshape(nc, 3 * ne).T
