"""Accuracy figures for a calibration: parameter deviations, trajectory error
after rigid or similarity alignment, and sweeps over point/view counts."""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import LengthMismatch, PipelineFailure, PlencalError, ZeroReference
from .geometry import Pose

log = logging.getLogger(__name__)

REPORT_PARAMS = ("f_L", "b_L0", "B", "c_x", "c_y")
UNITS = {"f_L": "mm", "b_L0": "mm", "B": "mm", "c_x": "pixel", "c_y": "pixel"}


def _value(intr, name):
    if name in ("k0", "k1", "k2", "p0", "p1"):
        return float(getattr(intr.distortion, name))
    return float(getattr(intr, name))


def parameter_report(estimated, reference, names=REPORT_PARAMS):
    """Absolute and relative deviation of every named parameter.

    The relative deviation is taken with respect to the reference value, so
    swapping the arguments changes it. Returns ``{name: {...}}`` keeping the
    order of ``names``.
    """
    out = {}
    for name in names:
        est, ref = _value(estimated, name), _value(reference, name)
        if ref == 0:
            raise ZeroReference(f"reference {name} is zero; relative deviation undefined")
        rel = abs(est - ref) / abs(ref)
        out[name] = {"estimate": est, "reference": ref, "abs_dev": abs(est - ref),
                     "rel_dev": rel, "rel_dev_pct": 100.0 * rel}
    return out


def relative_rmse(estimates, reference, names=REPORT_PARAMS):
    """RMSE over several runs of ``(est - ref) / ref`` in percent, per parameter."""
    estimates = list(estimates)
    if not estimates:
        raise ValueError("need at least one estimate")
    out = {}
    for name in names:
        ref = _value(reference, name)
        if ref == 0:
            raise ZeroReference(f"reference {name} is zero; relative deviation undefined")
        e = np.array([(_value(est, name) - ref) / ref for est in estimates])
        out[name] = 100.0 * float(np.sqrt(np.mean(e * e)))
    return out


def markdown_table(report, digits=3):
    """Markdown rendering of a :func:`parameter_report` result."""
    names = list(report)
    head = "| | " + " | ".join(f"{n} [{UNITS.get(n, '')}]".replace(" []", "") for n in names) + " |"
    sep = "|---|" + "---|" * len(names)
    rows = [head, sep]
    for label, key, fmt in (("estimate", "estimate", "{:.6g}"), ("reference", "reference", "{:.6g}"),
                            ("deviation [%]", "rel_dev_pct", "{:.%df}" % digits)):
        rows.append(f"| {label} | " + " | ".join(fmt.format(report[n][key]) for n in names) + " |")
    return "\n".join(rows) + "\n"


# -- trajectories ------------------------------------------------------------

def positions(traj):
    """World positions of camera centres from a list of camera-from-world
    poses, or an (n, 3) array passed through."""
    if len(traj) and isinstance(traj[0], Pose):
        return np.array([p.center() for p in traj])
    return np.asarray(traj, dtype=float).reshape(-1, 3)


def umeyama(src, dst, with_scale=True):
    """Least-squares ``s, R, t`` with ``dst ~ s R src + t`` (closed form, SVD)."""
    src = np.asarray(src, float)
    dst = np.asarray(dst, float)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    a, b = src - mu_s, dst - mu_d
    n = len(src)
    C = b.T @ a / n
    U, S, Vt = np.linalg.svd(C)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    var = float(np.sum(a * a)) / n
    s = float(np.trace(np.diag(S) @ D) / var) if with_scale and var > 0 else 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


@dataclass
class TrajectoryError:
    rmse: float
    errors: np.ndarray
    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    mode: str

    def to_dict(self):
        return {"mode": self.mode, "rmse_mm": self.rmse, "scale": self.scale,
                "max_error_mm": float(self.errors.max()) if len(self.errors) else 0.0,
                "errors_mm": self.errors.tolist()}


def trajectory_rmse(estimated, ground_truth, align_mode="similarity"):
    """Positional RMSE after aligning ``estimated`` onto ``ground_truth``.

    Both are camera-from-world pose lists (or position arrays) associated by
    index. ``rigid`` fits SE(3); ``similarity`` also fits a uniform scale,
    which is the reported ``scale``.
    """
    if align_mode not in ("rigid", "similarity"):
        raise ValueError(f"unknown align_mode {align_mode!r}")
    p_est, p_gt = positions(estimated), positions(ground_truth)
    if len(p_est) != len(p_gt):
        raise LengthMismatch(f"{len(p_est)} estimated vs {len(p_gt)} reference poses")
    if len(p_est) < 3:
        raise ValueError("alignment needs at least three poses")
    s, R, t = umeyama(p_est, p_gt, with_scale=align_mode == "similarity")
    aligned = s * p_est @ R.T + t
    err = np.linalg.norm(aligned - p_gt, axis=1)
    return TrajectoryError(float(np.sqrt(np.mean(err * err))), err, s, R, t, align_mode)


def trajectory_extent(traj):
    """Largest distance between any two camera positions."""
    p = positions(traj)
    if len(p) < 2:
        return 0.0
    from scipy.spatial.distance import pdist

    return float(pdist(p).max())


def associate(t_est, t_ref, max_dt=0.02):
    """Nearest-timestamp pairs ``(i_est, i_ref)``, each index used at most once.

    Candidate pairs are accepted greedily in order of increasing time gap.
    """
    t_est = np.asarray(t_est, float)
    t_ref = np.asarray(t_ref, float)
    if not len(t_est) or not len(t_ref):
        return np.zeros((0, 2), dtype=np.int64)
    order = np.argsort(t_ref)
    ts = t_ref[order]
    cands = []
    for i, t in enumerate(t_est):
        k = np.searchsorted(ts, t)
        for j in (k - 1, k):
            if 0 <= j < len(ts) and abs(ts[j] - t) <= max_dt:
                cands.append((abs(ts[j] - t), i, int(order[j])))
    cands.sort()
    used_e, used_r, pairs = set(), set(), []
    for _, i, j in cands:
        if i not in used_e and j not in used_r:
            used_e.add(i)
            used_r.add(j)
            pairs.append((i, j))
    pairs.sort()
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


# -- robustness sweep ----------------------------------------------------------

def relative_errors(estimated, reference, names=REPORT_PARAMS):
    return {n: (_value(estimated, n) - _value(reference, n)) / _value(reference, n) for n in names}


def _run_cell(args):
    ds, n_pts, n_views, rep, seed, config = args
    from .pipeline import CalibrationInput, calibrate
    from .synthgen import subsample

    t0 = time.perf_counter()
    rec = {"num_points": n_pts, "num_views": n_views, "repeat": rep}
    try:
        sub = subsample(ds, num_points=n_pts, num_views=n_views, seed=seed)
        res = calibrate(CalibrationInput.from_synthetic(sub), config)
        rec.update(status="ok", final_cost=float(res.report.final_cost),
                   termination=res.report.termination,
                   errors=relative_errors(res.intrinsics, ds.intrinsics_gt))
    except (PipelineFailure, PlencalError, ValueError, np.linalg.LinAlgError) as exc:
        rec.update(status="failed", stage=getattr(exc, "stage", "subsample"), message=str(exc))
    rec["seconds"] = time.perf_counter() - t0
    return rec


def robustness_sweep(dataset, point_counts, view_counts, repeats=1, config=None, seed=0, workers=1,
                     names=REPORT_PARAMS):
    """Calibrate seeded subsets of ``dataset`` for every (points, views) cell.

    Each repeat uses its own subsampling seed derived from ``seed``. Pipeline
    failures are recorded in the cell instead of aborting the sweep. Returns
    ``(cells, runs)``: per-cell aggregates and the individual run records.
    """
    jobs = []
    for n_pts in point_counts:
        for n_views in view_counts:
            for rep in range(repeats):
                sub_seed = int(np.random.SeedSequence([seed, n_pts, n_views, rep]).generate_state(1)[0])
                jobs.append((dataset, n_pts, n_views, rep, sub_seed, config))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            runs = list(ex.map(_run_cell, jobs))
    else:
        runs = [_run_cell(j) for j in jobs]

    cells = []
    for n_pts in point_counts:
        for n_views in view_counts:
            rs = [r for r in runs if r["num_points"] == n_pts and r["num_views"] == n_views]
            ok = [r for r in rs if r["status"] == "ok"]
            cell = {"num_points": n_pts, "num_views": n_views, "runs": len(rs), "failures": len(rs) - len(ok)}
            for n in names:
                e = np.array([r["errors"][n] for r in ok])
                cell[f"rmse_pct_{n}"] = 100.0 * float(np.sqrt(np.mean(e * e))) if len(e) else math.nan
            cells.append(cell)
    return cells, runs


def write_sweep_csv(path, cells):
    if not cells:
        raise ValueError("no sweep cells")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(cells[0]))
        w.writeheader()
        for c in cells:
            w.writerow(c)
