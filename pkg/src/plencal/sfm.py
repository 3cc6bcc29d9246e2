"""Pinhole structure-from-motion used to initialize the plenoptic model.

Every (point, view) cluster of micro-image observations encodes one virtual
image point. Its lateral coordinate (optionally moved to the total covering
plane, which makes the central projection an exact pinhole) is the feature
measurement of a conventional incremental SfM: two-view bootstrap, P3P
registration, midpoint triangulation and a pinhole bundle adjustment.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import cv2
import numpy as np

from .downstream import central_perspective_project
from .errors import (DegenerateGeometry, InsufficientMatches, NotConverged, RegistrationFailed,
                     SingularCluster, SingularSystem, Diverged)
from .geometry import Pose, quat_to_matrix, stack_poses, unstack_poses
from .lm import BundleProblem, BundleState, SolveOptions, solve_lm
from .model import VirtualPoint, micro_lens_centers, undistort

log = logging.getLogger(__name__)


# --- micro-image clusters ----------------------------------------------------


@dataclass
class ClusterMeasurements:
    """Virtual image points recovered per (point, view) cluster."""

    point: np.ndarray  # (P,)
    view: np.ndarray  # (P,)
    xy: np.ndarray  # (P, 2) lateral virtual coordinates x_V' (px)
    v: np.ndarray  # (P,) virtual depth
    num_lenses: np.ndarray  # (P,) observations kept in the fit
    obs_inlier: np.ndarray  # (n_obs,) per observation record
    singular: list = field(default_factory=list)  # excluded (point, view) pairs

    def __len__(self):
        return len(self.point)


def _segsum(values, starts):
    return np.add.reduceat(values, starts, axis=0)


def fit_cluster(x_R, centers):
    """Least-squares virtual point of one cluster from ``x_R = a + w * c``
    with ``v = 1 / (1 - w)`` and ``x_V' = a * v``; returns ``(x, y, v)``.

    Two lenses reduce to the disparity identity
    ``v = dc / (dc - dx)`` along the baseline.
    """
    x_R = np.asarray(x_R, dtype=float).reshape(-1, 2)
    centers = np.asarray(centers, dtype=float).reshape(-1, 2)
    dc = centers - centers.mean(axis=0)
    den = float(np.sum(dc * dc))
    if len(x_R) < 2 or den <= 1e-12:
        raise SingularCluster("cluster needs micro images of at least two distinct lenses")
    dx = x_R - x_R.mean(axis=0)
    w = float(np.sum(dc * dx)) / den
    a = x_R.mean(axis=0) - w * centers.mean(axis=0)
    v = 1.0 / (1.0 - w)
    return float(a[0] * v), float(a[1] * v), v


def virtual_track_centroids(obs, grid, intr_guess=None, outlier_px=1.0, max_rejections=3):
    """Recover ``(x_V', y_V', v)`` for every (point, view) cluster.

    With ``intr_guess`` the micro lens centers follow the model (scaled,
    distorted centers) and the raw coordinates are undistorted; without it
    the micro image centers stand in for the lens centers, which yields the
    virtual image relative to the sensor plane.

    Observations off the cluster fit by more than ``outlier_px`` are dropped
    one at a time (worst first) while at least two remain. Clusters with a
    single lens are excluded and listed in ``singular``.
    """
    if intr_guess is not None:
        centers = micro_lens_centers(intr_guess, grid)[obs.lens_ids]
        x_R = obs.xy if intr_guess.distortion.is_zero() else undistort(
            intr_guess.distortion, intr_guess.principal, obs.xy)
    else:
        centers = grid.centers[obs.lens_ids]
        x_R = obs.xy
    pp, pv, starts, counts = obs.pair_groups()
    if not len(starts):
        e = np.zeros(0, dtype=np.int64)
        return ClusterMeasurements(e, e, np.zeros((0, 2)), np.zeros(0), e, np.zeros(0, dtype=bool))
    pair = np.repeat(np.arange(len(starts)), counts)
    keep = np.ones(len(obs), dtype=bool)

    def fit(keep):
        m = keep.astype(float)
        n = _segsum(m, starts)
        nz = np.maximum(n, 1)
        cbar = _segsum(centers * m[:, None], starts) / nz[:, None]
        xbar = _segsum(x_R * m[:, None], starts) / nz[:, None]
        dc = centers - cbar[pair]
        dx = x_R - xbar[pair]
        num = _segsum(m * np.sum(dc * dx, axis=1), starts)
        den = _segsum(m * np.sum(dc * dc, axis=1), starts)
        ok = (n >= 2) & (den > 1e-12)
        w = np.where(ok, num / np.where(ok, den, 1.0), 0.0)
        err = np.linalg.norm(dx - w[pair, None] * dc, axis=1)
        return n, cbar, xbar, w, ok, err

    for _ in range(max_rejections):
        n, cbar, xbar, w, ok, err = fit(keep)
        e = np.where(keep, err, -1.0)
        worst = np.maximum.reduceat(e, starts)
        drop_pair = ok & (worst > outlier_px) & (n >= 3)
        if not drop_pair.any():
            break
        cand = drop_pair[pair] & (e == worst[pair])
        # only the first record reaching the maximum in each cluster
        first = np.zeros(len(obs), dtype=bool)
        idx = np.flatnonzero(cand)
        _, u = np.unique(pair[idx], return_index=True)
        first[idx[u]] = True
        keep &= ~first
    n, cbar, xbar, w, ok, err = fit(keep)

    with np.errstate(divide="ignore", invalid="ignore"):
        v = 1.0 / (1.0 - w)
    good = ok & np.isfinite(v) & (v > 0)
    a = xbar - w[:, None] * cbar
    xy = a * v[:, None]
    singular = [(int(p), int(q)) for p, q in zip(pp[~ok], pv[~ok])]
    keep &= good[pair]
    return ClusterMeasurements(pp[good], pv[good], xy[good], v[good], n[good].astype(np.int64), keep, singular)


def pinhole_measurements(clusters, intr_guess=None):
    """Per-cluster pinhole measurement: the virtual point projected onto the
    total covering plane through the main lens center. Without a guess of
    ``B``, ``b_L0`` and the principal point the raw ``x_V'`` is returned."""
    if intr_guess is None:
        return clusters.xy.copy()
    xp, yp = central_perspective_project(intr_guess, VirtualPoint(clusters.xy[:, 0], clusters.xy[:, 1], clusters.v))
    return np.stack([np.atleast_1d(xp), np.atleast_1d(yp)], axis=1)


# --- pinhole solution ----------------------------------------------------------


@dataclass
class Tracks:
    """Pinhole measurements sorted by (point, view)."""

    point: np.ndarray
    view: np.ndarray
    xy: np.ndarray
    num_points: int
    num_views: int

    def __post_init__(self):
        order = np.lexsort((self.view, self.point))
        self.point = np.asarray(self.point, dtype=np.int64)[order]
        self.view = np.asarray(self.view, dtype=np.int64)[order]
        self.xy = np.asarray(self.xy, dtype=float).reshape(-1, 2)[order]

    def __len__(self):
        return len(self.point)

    @classmethod
    def from_clusters(cls, clusters, xy, num_points=None, num_views=None):
        num_points = num_points if num_points is not None else int(clusters.point.max()) + 1
        num_views = num_views if num_views is not None else int(clusters.view.max()) + 1
        return cls(clusters.point, clusters.view, xy, num_points, num_views)

    def table(self):
        """Dense ``(num_views, num_points, 2)`` array, NaN where unobserved."""
        t = np.full((self.num_views, self.num_points, 2), np.nan)
        t[self.view, self.point] = self.xy
        return t


@dataclass
class PinholeSolution:
    """Arbitrary-scale reconstruction; ``poses[j]`` is None for unregistered
    views and ``points`` rows are NaN for untriangulated tracks."""

    f_px: float
    c_x: float
    c_y: float
    poses: list
    points: np.ndarray
    inlier: np.ndarray  # per track measurement
    ref_view: int = 0

    @property
    def K(self):
        return np.array([[self.f_px, 0.0, self.c_x], [0.0, self.f_px, self.c_y], [0.0, 0.0, 1.0]])

    @property
    def registered(self):
        return np.array([p is not None for p in self.poses])

    @property
    def triangulated(self):
        return np.all(np.isfinite(self.points), axis=1)

    def copy(self):
        return replace(self, poses=list(self.poses), points=self.points.copy(), inlier=self.inlier.copy())

    def usable(self, tracks):
        """Mask of measurements that enter the bundle adjustment."""
        return self.inlier & self.registered[tracks.view] & self.triangulated[tracks.point]

    def reprojection_errors(self, tracks, mask=None):
        mask = self.usable(tracks) if mask is None else mask
        err = np.full(len(tracks), np.nan)
        idx = np.flatnonzero(mask)
        for j in np.unique(tracks.view[idx]):
            rows = idx[tracks.view[idx] == j]
            pose = self.poses[j]
            X_C = pose.transform(self.points[tracks.point[rows]])
            with np.errstate(divide="ignore", invalid="ignore"):
                proj = self.f_px * X_C[:, :2] / X_C[:, 2:3] + [self.c_x, self.c_y]
            e = np.linalg.norm(proj - tracks.xy[rows], axis=1)
            err[rows] = np.where(X_C[:, 2] > 0, e, np.inf)
        return err

    def mean_reprojection_error(self, tracks):
        e = self.reprojection_errors(tracks)
        e = e[self.usable(tracks)]
        return float(np.mean(e)) if len(e) else float("nan")

    def reexpress(self, view):
        """Move the world frame onto the camera frame of ``view``."""
        T0 = self.poses[view]
        T0i = T0.inverse()
        poses = [None if p is None else p.compose(T0i) for p in self.poses]
        points = self.points.copy()
        ok = self.triangulated
        points[ok] = T0.transform(points[ok])
        return replace(self, poses=poses, points=points, ref_view=view, inlier=self.inlier.copy())

    def scaled(self, s):
        poses = [None if p is None else Pose(p.rotation, p.translation * s) for p in self.poses]
        return replace(self, poses=poses, points=self.points * s, inlier=self.inlier.copy())


# --- two-view geometry ------------------------------------------------------


def _normalize(x):
    m = x.mean(axis=0)
    d = np.sqrt(np.mean(np.sum((x - m) ** 2, axis=1)))
    s = np.sqrt(2.0) / max(d, 1e-12)
    T = np.array([[s, 0, -s * m[0]], [0, s, -s * m[1]], [0, 0, 1.0]])
    return (x - m) * s, T


def essential_8point(x1, x2):
    """Normalized 8-point essential matrix from calibrated coordinates
    (n >= 8, rows of ``x2^T E x1 = 0``)."""
    n1, T1 = _normalize(x1)
    n2, T2 = _normalize(x2)
    A = np.column_stack([n2[:, 0:1] * np.column_stack([n1, np.ones(len(n1))]),
                         n2[:, 1:2] * np.column_stack([n1, np.ones(len(n1))]),
                         np.column_stack([n1, np.ones(len(n1))])])
    _, _, Vt = np.linalg.svd(A)
    E = T2.T @ Vt[-1].reshape(3, 3) @ T1
    U, S, Vt = np.linalg.svd(E)
    s = 0.5 * (S[0] + S[1])
    return U @ np.diag([s, s, 0.0]) @ Vt


def sampson_distance(E, x1, x2):
    h1 = np.column_stack([x1, np.ones(len(x1))])
    h2 = np.column_stack([x2, np.ones(len(x2))])
    Ex1 = h1 @ E.T
    Etx2 = h2 @ E
    num = np.sum(h2 * Ex1, axis=1) ** 2
    den = Ex1[:, 0] ** 2 + Ex1[:, 1] ** 2 + Etx2[:, 0] ** 2 + Etx2[:, 1] ** 2
    return np.sqrt(num / np.maximum(den, 1e-300))


def homography_dlt(x1, x2):
    n1, T1 = _normalize(x1)
    n2, T2 = _normalize(x2)
    z = np.zeros((len(n1), 3))
    h1 = np.column_stack([n1, np.ones(len(n1))])
    A = np.vstack([np.hstack([z, -h1, n2[:, 1:2] * h1]), np.hstack([h1, z, -n2[:, 0:1] * h1])])
    _, _, Vt = np.linalg.svd(A)
    H = np.linalg.inv(T2) @ Vt[-1].reshape(3, 3) @ T1
    return H / H[2, 2] if abs(H[2, 2]) > 1e-300 else H


def _transfer_error(H, x1, x2):
    p = np.column_stack([x1, np.ones(len(x1))]) @ H.T
    with np.errstate(divide="ignore", invalid="ignore"):
        q = p[:, :2] / p[:, 2:3]
    e = np.linalg.norm(q - x2, axis=1)
    return np.where(np.isfinite(e), e, np.inf)


def _ransac_iterations(inlier_ratio, sample, confidence):
    w = min(max(inlier_ratio, 1e-9), 1.0)
    if w >= 1.0:
        return 0
    denom = np.log1p(-(w ** sample))
    if denom == 0.0:
        return 1 << 30
    return int(min(np.ceil(np.log(1 - confidence) / denom), 1 << 30))


def _ransac(n, sample, fit, score, rng, confidence, max_iter, min_iter=20):
    best, best_mask = None, None
    best_count = -1
    needed = max_iter
    it = 0
    while it < min(needed, max_iter) or it < min_iter:
        it += 1
        idx = rng.choice(n, size=sample, replace=False)
        try:
            models = fit(idx)
        except (np.linalg.LinAlgError, ValueError, cv2.error):
            continue
        for m in models:
            mask = score(m)
            c = int(mask.sum())
            if c > best_count:
                best, best_mask, best_count = m, mask, c
                needed = _ransac_iterations(c / n, sample, confidence)
    return best, best_mask


def triangulate_midpoint(centers, dirs, groups, num_groups):
    """Point closest (least squares) to all rays of each group.

    ``centers``/``dirs`` are (m, 3) ray origins and unit directions, ``groups``
    assigns rays to output points. Returns (num_groups, 3) and the maximum
    pairwise ray angle per group (radians).
    """
    P = np.eye(3)[None] - dirs[:, :, None] * dirs[:, None, :]
    A = np.zeros((num_groups, 3, 3))
    b = np.zeros((num_groups, 3))
    np.add.at(A, groups, P)
    np.add.at(b, groups, np.einsum("nij,nj->ni", P, centers))
    det = np.linalg.det(A)
    ok = np.abs(det) > 1e-12
    X = np.full((num_groups, 3), np.nan)
    X[ok] = np.linalg.solve(A[ok], b[ok][:, :, None])[:, :, 0]
    return X


def _rays(pose, K, xy):
    h = np.column_stack([(xy[:, 0] - K[0, 2]) / K[0, 0], (xy[:, 1] - K[1, 2]) / K[1, 1], np.ones(len(xy))])
    d = h @ pose.R  # R^T h
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.broadcast_to(pose.center(), d.shape), d


def _ray_angles(pose_a, pose_b, K, xa, xb):
    _, da = _rays(pose_a, K, xa)
    _, db = _rays(pose_b, K, xb)
    return np.arccos(np.clip(np.sum(da * db, axis=1), -1.0, 1.0))


def _decompose_essential(E, x1, x2):
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    Wm = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    best = None
    I = np.eye(3)
    for R in (U @ Wm @ Vt, U @ Wm.T @ Vt):
        for t in (U[:, 2], -U[:, 2]):
            pose = Pose.from_matrix(R, t)
            X = _two_view_points(Pose.identity(), pose, I, x1, x2)
            za = X[:, 2]
            zb = (X @ R.T + t)[:, 2]
            front = np.isfinite(za) & (za > 0) & (zb > 0)
            if best is None or front.sum() > best[0]:
                best = (int(front.sum()), pose, X, front)
    return best[1], best[2], best[3]


def _two_view_points(pa, pb, K, xa, xb):
    ca, da = _rays(pa, K, xa)
    cb, db = _rays(pb, K, xb)
    n = len(xa)
    groups = np.concatenate([np.arange(n), np.arange(n)])
    return triangulate_midpoint(np.vstack([ca, cb]), np.vstack([da, db]), groups, n)


@dataclass
class TwoViewResult:
    pose: Pose  # second view, first view is the identity
    points: np.ndarray  # (n, 3), NaN for outliers
    inlier: np.ndarray
    median_angle: float  # radians, over inliers


def two_view_bootstrap(x_a, x_b, f_px, principal, threshold=1.5, confidence=0.999, max_iter=2000,
                       seed=0, homography_ratio=0.95):
    """Relative pose of view b w.r.t. view a (identity) and triangulated points.

    RANSAC over the normalized 8-point essential matrix with a Sampson
    distance threshold in pixels, refit on all inliers, cheirality-checked
    pose decomposition and midpoint triangulation. The scale is fixed by a
    unit median depth in view a. A homography explaining nearly all
    essential-matrix inliers flags pure rotation or a planar scene.
    """
    x_a = np.asarray(x_a, dtype=float).reshape(-1, 2)
    x_b = np.asarray(x_b, dtype=float).reshape(-1, 2)
    n = len(x_a)
    if n < 8:
        raise InsufficientMatches(f"{n} shared tracks, the 8-point estimate needs at least 8")
    rng = np.random.default_rng(seed)
    c = np.asarray(principal, dtype=float)
    n1 = (x_a - c) / f_px
    n2 = (x_b - c) / f_px
    thr = threshold / f_px

    E, mask = _ransac(n, 8, lambda i: [essential_8point(n1[i], n2[i])],
                      lambda E: sampson_distance(E, n1, n2) < thr, rng, confidence, max_iter)
    if E is None or mask.sum() < 8:
        raise InsufficientMatches("too few essential-matrix inliers")
    E = essential_8point(n1[mask], n2[mask])
    mask = sampson_distance(E, n1, n2) < thr
    if mask.sum() < 8:
        raise InsufficientMatches("too few essential-matrix inliers")

    H, hmask = _ransac(n, 4, lambda i: [homography_dlt(x_a[i], x_b[i])],
                       lambda H: _transfer_error(H, x_a, x_b) < threshold, rng, confidence, max_iter)
    if H is not None and hmask.sum() >= homography_ratio * mask.sum():
        raise DegenerateGeometry("a homography explains the correspondences (no baseline or planar scene)")

    pose, X, front = _decompose_essential(E, n1, n2)
    inlier = mask & front
    if inlier.sum() < 8:
        raise DegenerateGeometry("too few points in front of both cameras")
    X[~inlier] = np.nan
    s = 1.0 / float(np.median(X[inlier, 2]))
    X *= s
    pose = Pose(pose.rotation, pose.translation * s)
    ang = _ray_angles(Pose.identity(), pose, np.eye(3), n1[inlier], n2[inlier])
    return TwoViewResult(pose, X, inlier, float(np.median(ang)))


# --- registration -------------------------------------------------------------


def _project(pose, K, X):
    X_C = pose.transform(X)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = X_C[:, :2] / X_C[:, 2:3] * [K[0, 0], K[1, 1]] + [K[0, 2], K[1, 2]]
    return p, X_C[:, 2]


def _reproj_error(pose, K, X, xy):
    p, z = _project(pose, K, X)
    e = np.linalg.norm(p - xy, axis=1)
    return np.where((z > 0) & np.isfinite(e), e, np.inf)


def estimate_pose_p3p(X, xy, K, threshold=3.0, confidence=0.999, max_iter=1000, rng=None):
    """Camera pose from 3D-2D correspondences: P3P hypotheses in RANSAC, then
    Levenberg-Marquardt refinement on the inliers. Returns ``(pose, inlier)``."""
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    n = len(X)
    if n < 4:
        raise RegistrationFailed(f"{n} correspondences, registration needs at least 4")
    rng = rng if rng is not None else np.random.default_rng(0)

    def fit(idx):
        ok, rvecs, tvecs = cv2.solveP3P(X[idx].astype(np.float64), xy[idx].astype(np.float64), K, None,
                                        flags=cv2.SOLVEPNP_P3P)
        out = []
        for r, t in zip(rvecs or [], tvecs or []):
            R, _ = cv2.Rodrigues(r)
            out.append(Pose.from_matrix(R, np.asarray(t).reshape(3)))
        return out

    pose, mask = _ransac(n, 3, fit, lambda p: _reproj_error(p, K, X, xy) < threshold, rng, confidence, max_iter)
    if pose is None or mask.sum() < 4:
        raise RegistrationFailed("fewer than 4 inliers")
    rvec, _ = cv2.Rodrigues(pose.R)
    rvec, tvec = cv2.solvePnPRefineLM(X[mask], xy[mask], K, None, rvec, pose.translation.reshape(3, 1).copy())
    R, _ = cv2.Rodrigues(rvec)
    refined = Pose.from_matrix(R, tvec.reshape(3))
    mask2 = _reproj_error(refined, K, X, xy) < threshold
    if mask2.sum() >= mask.sum():
        pose, mask = refined, mask2
    if mask.sum() < 4:
        raise RegistrationFailed("fewer than 4 inliers")
    return pose, mask


def triangulate_tracks(solution, tracks, threshold=3.0, min_angle_deg=0.5, points=None):
    """Triangulate tracks seen in at least two registered views (all of them if
    ``points`` is None, else only the given point ids that are not triangulated
    yet). Points failing cheirality, reprojection or angle checks stay NaN."""
    sol = solution.copy()
    reg = sol.registered
    cand = ~sol.triangulated
    if points is not None:
        sel = np.zeros_like(cand)
        sel[np.asarray(points, dtype=np.int64)] = True
        cand &= sel
    m = cand[tracks.point] & reg[tracks.view] & sol.inlier
    if not m.any():
        return sol
    rows = np.flatnonzero(m)
    nv = np.bincount(tracks.point[rows], minlength=tracks.num_points)
    rows = rows[nv[tracks.point[rows]] >= 2]
    if not len(rows):
        return sol
    C = np.zeros((len(rows), 3))
    D = np.zeros((len(rows), 3))
    K = sol.K
    for j in np.unique(tracks.view[rows]):
        sel = tracks.view[rows] == j
        C[sel], D[sel] = _rays(sol.poses[j], K, tracks.xy[rows[sel]])
    pts, inv = np.unique(tracks.point[rows], return_inverse=True)
    X = triangulate_midpoint(C, D, inv, len(pts))
    # acceptance: finite, in front of and reprojecting within threshold in every view
    ok = np.all(np.isfinite(X), axis=1)
    Xr = X[inv]
    err = np.full(len(rows), np.inf)
    for j in np.unique(tracks.view[rows]):
        sel = tracks.view[rows] == j
        err[sel] = _reproj_error(sol.poses[j], K, Xr[sel], tracks.xy[rows[sel]])
    bad = np.zeros(len(pts), dtype=bool)
    np.logical_or.at(bad, inv, ~(err < threshold))
    # for two rays at angle a, 1 - |mean direction| = 1 - cos(a / 2)
    dmean = np.zeros((len(pts), 3))
    np.add.at(dmean, inv, D)
    cnt = np.bincount(inv, minlength=len(pts))
    spread = 1.0 - np.linalg.norm(dmean, axis=1) / cnt
    min_spread = 1.0 - np.cos(np.deg2rad(min_angle_deg) / 2)
    ok &= ~bad & (spread >= min_spread)
    sol.points[pts[ok]] = X[ok]
    return sol


def incremental_register(solution, tracks, view, threshold=3.0, confidence=0.999, rng=None):
    """Register ``view`` from its measurements of already triangulated points,
    then triangulate the tracks it completes."""
    sel = (tracks.view == view) & solution.triangulated[tracks.point] & solution.inlier
    rows = np.flatnonzero(sel)
    if len(rows) < 4:
        raise RegistrationFailed(f"view {view}: {len(rows)} known points visible, need at least 4")
    pose, mask = estimate_pose_p3p(solution.points[tracks.point[rows]], tracks.xy[rows], solution.K,
                                   threshold=threshold, confidence=confidence, rng=rng)
    sol = solution.copy()
    sol.poses[view] = pose
    sol.inlier[rows[~mask]] = False
    new_pts = tracks.point[(tracks.view == view)]
    return triangulate_tracks(sol, tracks, threshold=threshold, points=new_pts)


# --- pinhole bundle adjustment ------------------------------------------------


def pinhole_model(view_idx, point_idx):
    """Pinhole projection ``f * X_C / Z_C + c`` in the generic bundle layout
    with intrinsics ``(f, c_x, c_y)``."""

    def model(theta, R, t, X, jac):
        Rv = R[view_idx]
        Xw = X[point_idx]
        RX = (Rv * Xw[:, None, :]).sum(axis=2)
        Xc = RX + t[view_idx]
        z = Xc[:, 2]
        valid = z > 1e-9
        iz = 1.0 / np.where(valid, z, 1.0)
        u = Xc[:, 0] * iz
        w = Xc[:, 1] * iz
        f, cx, cy = theta
        pred = np.stack([f * u + cx, f * w + cy], axis=1)
        if not jac:
            return pred, valid, None, None, None
        n = len(z)
        Jc = np.zeros((n, 2, 3))
        Jc[:, 0, 0] = f * iz
        Jc[:, 0, 2] = -f * u * iz
        Jc[:, 1, 1] = f * iz
        Jc[:, 1, 2] = -f * w * iz
        Ji = np.zeros((n, 2, 3))
        Ji[:, 0, 0] = u
        Ji[:, 1, 0] = w
        Ji[:, 0, 1] = 1.0
        Ji[:, 1, 2] = 1.0
        Jrot = np.cross(RX[:, None, :], Jc)
        Jp = np.concatenate([Jrot, Jc], axis=2)
        Jx = Jc[:, :, 0, None] * Rv[:, None, 0, :] + Jc[:, :, 1, None] * Rv[:, None, 1, :] \
            + Jc[:, :, 2, None] * Rv[:, None, 2, :]
        return pred, valid, Ji, Jp, Jx

    return model


def pinhole_ba(solution, tracks, options=None, robust_scale=1.0, fix_intrinsics=False):
    """Refine ``(f_px, c_x, c_y)``, poses and points by Huber-robust LM.

    Gauge: the reference view's pose is fixed and one point's coordinate along
    the reference optical axis is frozen (the reference pose is the identity,
    so this is the point's depth). Returns ``(solution, report)``; raises
    :class:`NotConverged` carrying ``solution``/``report`` if the iteration
    budget runs out. A zero budget returns the input unchanged.
    """
    options = options or SolveOptions(robust_scale=robust_scale, compute_covariance=False)
    if options.max_iter == 0:
        return solution.copy(), None
    use = solution.usable(tracks)
    rows = np.flatnonzero(use)
    views = np.flatnonzero(solution.registered)
    pts = np.flatnonzero(solution.triangulated & (np.bincount(tracks.point[rows], minlength=tracks.num_points) > 0))
    vmap = -np.ones(tracks.num_views, dtype=np.int64)
    vmap[views] = np.arange(len(views))
    pmap = -np.ones(tracks.num_points, dtype=np.int64)
    pmap[pts] = np.arange(len(pts))
    rows = rows[pmap[tracks.point[rows]] >= 0]
    vi = vmap[tracks.view[rows]]
    pi = pmap[tracks.point[rows]]
    frozen = np.zeros((len(pts), 3), dtype=bool)
    anchor = int(np.argmax(np.bincount(pi, minlength=len(pts))))
    frozen[anchor, 2] = True
    ref = int(vmap[solution.ref_view])
    free = np.array([not fix_intrinsics] * 3)
    bundle = BundleProblem(pinhole_model(vi, pi), tracks.xy[rows], vi, pi, len(views), len(pts), free,
                           fixed_views=(ref,), frozen_coords=frozen)
    q, t = stack_poses([solution.poses[j] for j in views])
    state = BundleState(np.array([solution.f_px, solution.c_x, solution.c_y]), q, t, solution.points[pts].copy())
    try:
        state, report = solve_lm(bundle, state, replace(options, robust_scale=robust_scale))
    except Diverged as exc:
        state, report = exc.state, exc.report
    out = solution.copy()
    out.f_px, out.c_x, out.c_y = (float(x) for x in state.theta)
    for j, p in zip(views, unstack_poses(state.quats, state.trans)):
        out.poses[j] = p
    out.points[pts] = state.points
    if report.termination == "max_iterations":
        exc = NotConverged(f"pinhole bundle adjustment stopped at max_iter with cost {report.final_cost:.6g}")
        exc.solution, exc.report = out, report
        raise exc
    return out, report


def _ba_tolerant(solution, tracks, options, robust_scale):
    try:
        sol, rep = pinhole_ba(solution, tracks, options, robust_scale)
        if rep is not None:
            log.debug("pinhole BA: %d iterations, %s, cost %.6g", rep.iterations, rep.termination, rep.final_cost)
        return sol
    except NotConverged as exc:
        log.info("%s", exc)
        return exc.solution


def reject_outliers(solution, tracks, threshold):
    """Mark usable measurements reprojecting worse than ``threshold`` px."""
    sol = solution.copy()
    err = sol.reprojection_errors(tracks)
    bad = sol.usable(tracks) & ~(err < threshold)
    sol.inlier[bad] = False
    # points left with fewer than two views lose their coordinates
    use = sol.usable(tracks)
    nv = np.bincount(tracks.point[use], minlength=tracks.num_points)
    sol.points[(nv < 2) & sol.triangulated] = np.nan
    return sol


# --- driver -------------------------------------------------------------------


@dataclass
class SfmOptions:
    sampson_threshold: float = 1.5
    registration_threshold: float = 3.0
    confidence: float = 0.999
    final_threshold: float = 1.5
    robust_scale: float = 1.0
    shortlist: int = 8
    ba_growth: float = 1.5
    ba_max_iter: int = 30
    final_max_iter: int = 100
    seed: int = 0


def select_initial_pair(tracks, f_px, principal, options=None):
    """View pair maximizing shared tracks x median triangulation angle.

    Candidates are the ``shortlist`` pairs ranked by shared tracks x median
    image displacement; each is bootstrapped and scored on its inliers.
    Returns ``(a, b, TwoViewResult)``.
    """
    options = options or SfmOptions()
    T = tracks.table()
    nvw = tracks.num_views
    obs = np.isfinite(T[:, :, 0])
    proxy = np.zeros((nvw, nvw))
    for a in range(nvw):
        both = obs[a][None, :] & obs
        shared = both.sum(axis=1)
        d = np.linalg.norm(T - T[a][None], axis=2)
        d = np.where(both, d, np.nan)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            med = np.nanmedian(d, axis=1)
        proxy[a] = np.where(shared >= 8, shared * np.nan_to_num(med), 0.0)
    proxy[np.tril_indices(nvw)] = 0.0
    order = np.argsort(proxy, axis=None)[::-1]
    best = None
    tried = 0
    for flat in order:
        if tried >= options.shortlist or proxy.flat[flat] <= 0:
            break
        a, b = divmod(int(flat), nvw)
        tried += 1
        both = obs[a] & obs[b]
        try:
            res = two_view_bootstrap(T[a, both], T[b, both], f_px, principal, options.sampson_threshold,
                                     options.confidence, seed=options.seed + a * nvw + b)
        except (DegenerateGeometry, InsufficientMatches):
            continue
        score = res.inlier.sum() * res.median_angle
        if best is None or score > best[0]:
            best = (score, a, b, res, np.flatnonzero(both))
    if best is None:
        raise DegenerateGeometry("no view pair yields a usable two-view reconstruction")
    _, a, b, res, pts = best
    return a, b, res, pts


def reconstruct(tracks, f_px, principal, options=None):
    """Incremental pinhole SfM over ``tracks``; returns a :class:`PinholeSolution`
    expressed in the frame of its lowest registered view id."""
    options = options or SfmOptions()
    rng = np.random.default_rng(options.seed)
    a, b, res, pts = select_initial_pair(tracks, f_px, principal, options)
    sol = PinholeSolution(float(f_px), float(principal[0]), float(principal[1]), [None] * tracks.num_views,
                          np.full((tracks.num_points, 3), np.nan), np.ones(len(tracks), dtype=bool), ref_view=a)
    sol.poses[a] = Pose.identity()
    sol.poses[b] = res.pose
    sol.points[pts[res.inlier]] = res.points[res.inlier]
    sol = triangulate_tracks(sol, tracks, options.registration_threshold)
    ba_opts = SolveOptions(max_iter=options.ba_max_iter, function_tol=1e-6, robust_scale=options.robust_scale,
                           compute_covariance=False)
    sol = _ba_tolerant(sol, tracks, ba_opts, options.robust_scale)
    last_ba = 2
    failed = set()
    while True:
        reg = sol.registered
        known = sol.triangulated[tracks.point] & sol.inlier
        counts = np.bincount(tracks.view[known], minlength=tracks.num_views)
        counts[reg] = -1
        counts[list(failed)] = -1
        j = int(np.argmax(counts))
        if counts[j] < 4:
            break
        try:
            sol = incremental_register(sol, tracks, j, options.registration_threshold, options.confidence, rng)
        except RegistrationFailed as exc:
            log.info("%s", exc)
            failed.add(j)
            continue
        nreg = int(sol.registered.sum())
        if nreg >= last_ba * options.ba_growth:
            sol = _ba_tolerant(sol, tracks, ba_opts, options.robust_scale)
            sol = reject_outliers(sol, tracks, 2 * options.registration_threshold)
            sol = triangulate_tracks(sol, tracks, options.registration_threshold)
            last_ba = nreg
            failed.clear()
    final = SolveOptions(max_iter=options.final_max_iter, robust_scale=options.robust_scale, compute_covariance=False)
    sol = _ba_tolerant(sol, tracks, final, options.robust_scale)
    sol = reject_outliers(sol, tracks, 3 * options.final_threshold)
    sol = triangulate_tracks(sol, tracks, options.registration_threshold)
    sol = _ba_tolerant(sol, tracks, final, options.robust_scale)
    first = int(np.flatnonzero(sol.registered)[0])
    sol = sol.reexpress(first)
    return sol


def retrack(solution, old_tracks, new_tracks):
    """Carry a solution over to a new set of measurements of the same
    (point, view) pairs; the per-measurement inlier flags follow their pair
    and new pairs start as inliers."""
    nv = max(old_tracks.num_views, new_tracks.num_views)
    old_key = old_tracks.point * nv + old_tracks.view
    new_key = new_tracks.point * nv + new_tracks.view
    inlier = np.ones(len(new_tracks), dtype=bool)
    pos = np.searchsorted(old_key, new_key)
    pos = np.minimum(pos, max(len(old_key) - 1, 0))
    hit = (old_key[pos] == new_key) if len(old_key) else np.zeros(len(new_key), dtype=bool)
    inlier[hit] = solution.inlier[pos[hit]]
    return replace(solution, poses=list(solution.poses), points=solution.points.copy(), inlier=inlier)
