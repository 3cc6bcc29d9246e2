"""Synthetic ground-truth datasets: camera, MLA, scene, trajectory and noisy
micro-image observations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .data import ObservationSet, ScaleConstraint
from .errors import InsufficientVisibility
from .geometry import Pose
from .model import MicroLensGrid, PlenopticIntrinsics, distort, project_points

# Raytrix R5 with the 16 mm main lens.
R5_16MM = PlenopticIntrinsics(f_L=16.748, b_L0=15.893, B=0.376, c_x=1018.7, c_y=1054.2, s_x=0.0055, s_y=0.0055)
SENSOR_SIZE = (2048, 2048)
DEFAULT_PITCH = 23.0


def generate_hex_grid(sensor_w, sensor_h, pitch, radius=None):
    """Hexagonally packed micro image centers with nearest-neighbour distance ``pitch``."""
    if pitch < 4:
        raise ValueError("pitch must be at least 4 px")
    row_step = pitch * np.sqrt(3) / 2
    x0 = min(pitch / 2, sensor_w / 2)
    y0 = min(pitch / 2, sensor_h / 2)
    centers = []
    for r, y in enumerate(np.arange(y0, sensor_h, row_step)):
        xs = np.arange(x0 + (pitch / 2 if r % 2 else 0.0), sensor_w, pitch)
        if not len(xs) and r == 0:
            xs = np.array([x0])
        centers.extend((x, y) for x in xs)
    centers = np.array(centers, dtype=float).reshape(-1, 2)
    if radius is None:
        radius = 0.5 * pitch - 1.0
    return MicroLensGrid(centers, radius, sensor_w, sensor_h)


@dataclass
class SceneSpec:
    num_points: int = 1500
    num_views: int = 70
    box_min: tuple = (-500.0, -400.0, 500.0)
    box_max: tuple = (500.0, 400.0, 2500.0)
    noise_sigma: float = 0.2
    outlier_fraction: float = 0.0
    rng_seed: int = 0
    trajectory: list | None = None
    # winding path amplitudes (mm) of the camera centre in x, y, z
    amplitude: tuple = (300.0, 150.0, 150.0)
    num_scale_constraints: int = 3
    scale_weight: float = 10.0
    min_constraint_distance: float = 300.0

    def validate(self):
        from .errors import InvalidConfig

        if self.num_points < 8:
            raise InvalidConfig("num_points", f"need at least 8 points, got {self.num_points}")
        nv = len(self.trajectory) if self.trajectory is not None else self.num_views
        if nv < 2:
            raise InvalidConfig("num_views", f"need at least 2 views, got {nv}")
        if not 0 <= self.noise_sigma:
            raise InvalidConfig("noise_sigma", "must be non-negative")
        if not 0 <= self.outlier_fraction < 1:
            raise InvalidConfig("outlier_fraction", "must lie in [0, 1)")
        if np.any(np.asarray(self.box_max) <= np.asarray(self.box_min)):
            raise InvalidConfig("box_max", "must exceed box_min componentwise")


@dataclass
class SyntheticDataset:
    intrinsics_gt: PlenopticIntrinsics
    grid: MicroLensGrid
    poses_gt: list
    points_gt: np.ndarray
    observations: ObservationSet
    scale_constraints: list
    noiseless_xy: np.ndarray = field(repr=False, default=None)
    outlier_mask: np.ndarray = field(repr=False, default=None)
    nominal_f_L: float | None = None


def look_at(center, target, up=(0.0, -1.0, 0.0)):
    """Camera-from-world pose at ``center`` looking at ``target`` (z forward, y down)."""
    center = np.asarray(center, float)
    z = np.asarray(target, float) - center
    z /= np.linalg.norm(z)
    x = np.cross(-np.asarray(up, float), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return Pose.from_matrix(R, -R @ center)


def winding_trajectory(num_views, amplitude, target, rng=None):
    """Camera poses along a winding path, all looking roughly at ``target``."""
    t = np.linspace(0.0, 1.0, num_views)
    ax, ay, az = amplitude
    centers = np.stack([
        ax * np.sin(2 * np.pi * 1.5 * t),
        ay * np.sin(2 * np.pi * 2.5 * t + 0.7),
        az * np.cos(2 * np.pi * 1.0 * t),
    ], axis=1)
    target = np.asarray(target, float)
    wobble = np.stack([
        0.15 * ax * np.sin(2 * np.pi * 3.0 * t + 0.3),
        0.15 * ay * np.cos(2 * np.pi * 2.0 * t),
        np.zeros_like(t),
    ], axis=1)
    poses = []
    for k in range(num_views):
        roll = 0.15 * np.sin(2 * np.pi * 2.0 * t[k])
        up = (np.sin(roll), -np.cos(roll), 0.0)
        poses.append(look_at(centers[k], target + wobble[k], up=up))
    return poses


def _visible_observations(intr, grid, pose, points, c_Id, tree):
    """All (point, lens) pairs whose projection lands in the micro image."""
    theta = intr.to_vector()
    X_C = pose.transform(points)
    z = X_C[:, 2]
    ok = z > intr.f_L * 1.01
    zs = np.where(ok, z, 2 * intr.f_L)
    bL = intr.f_L * zs / (zs - intr.f_L)
    v = (bL - intr.b_L0) / intr.B
    ok &= v > 1.05
    xv = bL * X_C[:, 0] / zs / intr.s_x + intr.c_x
    yv = bL * X_C[:, 1] / zs / intr.s_y + intr.c_y
    ok &= (xv > 0) & (xv < grid.sensor_width) & (yv > 0) & (yv < grid.sensor_height)
    idx = np.flatnonzero(ok)
    if not len(idx):
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 2))
    # lens k sees virtual points within R*v of c + kappa * (c_Id - c)
    sig = intr.b_L0 / (intr.b_L0 + intr.B)
    kappa = sig + v[idx] * (1 - sig)
    c = intr.principal
    q = (np.stack([xv[idx], yv[idx]], axis=1) - c) / kappa[:, None] + c
    radii = grid.micro_image_radius * v[idx] / kappa * 1.1 + 3.0
    hits = tree.query_ball_point(q, radii)
    pi = np.repeat(idx, [len(h) for h in hits])
    li = np.fromiter((l for h in hits for l in h), dtype=np.int64, count=len(pi))
    if not len(pi):
        return pi, li, np.zeros((0, 2))
    # same arithmetic as the bundle adjustment, so gt residuals are exactly zero
    n = len(pi)
    pred, valid, *_ = project_points(theta, intr.s_x, intr.s_y, np.broadcast_to(pose.R, (n, 3, 3)),
                                     np.broadcast_to(pose.translation, (n, 3)), points[pi], grid.centers,
                                     jac=False, lens_idx=li)
    inside = valid & (np.linalg.norm(pred - c_Id[li], axis=1) <= grid.micro_image_radius)
    return pi[inside], li[inside], pred[inside]


def _sample_points(rng, spec, n):
    lo = np.asarray(spec.box_min, float)
    hi = np.asarray(spec.box_max, float)
    return lo + rng.random((n, 3)) * (hi - lo)


def generate(spec, intr_gt=R5_16MM, grid=None, max_attempts=100):
    """Build a :class:`SyntheticDataset`; deterministic for a given ``spec.rng_seed``."""
    spec.validate()
    rng = np.random.default_rng(spec.rng_seed)
    if grid is None:
        grid = generate_hex_grid(*SENSOR_SIZE, DEFAULT_PITCH)
    lo = np.asarray(spec.box_min, float)
    hi = np.asarray(spec.box_max, float)
    target = 0.5 * (lo + hi)
    poses = list(spec.trajectory) if spec.trajectory is not None else winding_trajectory(
        spec.num_views, spec.amplitude, target)

    c = intr_gt.principal
    c_Id = distort(intr_gt.distortion, c, grid.centers)
    tree = cKDTree(c_Id)

    points = _sample_points(rng, spec, spec.num_points)
    todo = np.arange(spec.num_points)
    per_view = [None] * len(poses)
    for _ in range(max_attempts):
        counts = np.zeros(spec.num_points, dtype=np.int64)
        per_view = []
        for pose in poses:
            pi, li, xy = _visible_observations(intr_gt, grid, pose, points, c_Id, tree)
            per_view.append((pi, li, xy))
            counts += np.bincount(np.unique(pi), minlength=spec.num_points)
        todo = np.flatnonzero(counts < 2)
        if not len(todo):
            break
        points[todo] = _sample_points(rng, spec, len(todo))
    else:
        raise InsufficientVisibility(f"{len(todo)} points visible in fewer than 2 views after {max_attempts} attempts")

    pid = np.concatenate([p for p, _, _ in per_view])
    lid = np.concatenate([l for _, l, _ in per_view])
    vid = np.concatenate([np.full(len(p), j, dtype=np.int64) for j, (p, _, _) in enumerate(per_view)])
    clean = np.concatenate([xy for _, _, xy in per_view])
    obs = ObservationSet(pid, vid, lid, clean)
    clean = obs.xy.copy()
    noisy = clean + rng.normal(0.0, spec.noise_sigma, clean.shape) if spec.noise_sigma > 0 else clean.copy()
    outliers = np.zeros(len(obs), dtype=bool)
    n_out = int(np.floor(spec.outlier_fraction * len(obs)))
    if n_out:
        sel = rng.choice(len(obs), size=n_out, replace=False)
        outliers[sel] = True
        r = grid.micro_image_radius * np.sqrt(rng.random(n_out))
        phi = 2 * np.pi * rng.random(n_out)
        noisy[sel] = c_Id[obs.lens_ids[sel]] + np.stack([r * np.cos(phi), r * np.sin(phi)], axis=1)
    obs = obs.with_xy(noisy)

    constraints = []
    tries = 0
    while len(constraints) < spec.num_scale_constraints and tries < 1000:
        tries += 1
        a, b = rng.choice(spec.num_points, size=2, replace=False)
        d = float(np.linalg.norm(points[a] - points[b]))
        if d >= spec.min_constraint_distance:
            constraints.append(ScaleConstraint(int(a), int(b), d, spec.scale_weight))

    return SyntheticDataset(intr_gt, grid, poses, points, obs, constraints, clean, outliers)


def subsample(ds, num_points=None, num_views=None, seed=0):
    """Random subset of points and/or views with ids re-densified."""
    rng = np.random.default_rng(seed)
    n_pts = len(ds.points_gt)
    n_views = len(ds.poses_gt)
    views = np.arange(n_views)
    if num_views is not None and num_views < n_views:
        views = np.sort(rng.choice(n_views, size=num_views, replace=False))
        views = np.union1d(views[1:], [0]) if 0 not in views else views
    obs = ds.observations
    mask = np.isin(obs.view_ids, views)
    present = np.unique(obs.point_ids[mask])
    pts = present
    if num_points is not None and num_points < len(present):
        keep_c = {c.point_a for c in ds.scale_constraints} | {c.point_b for c in ds.scale_constraints}
        forced = np.array(sorted(k for k in keep_c if k in set(present.tolist())), dtype=np.int64)
        rest = np.setdiff1d(present, forced)
        extra = max(num_points - len(forced), 0)
        pts = np.sort(np.concatenate([forced, rng.choice(rest, size=min(extra, len(rest)), replace=False)]))
    mask &= np.isin(obs.point_ids, pts)
    pmap = -np.ones(n_pts, dtype=np.int64)
    pmap[pts] = np.arange(len(pts))
    vmap = -np.ones(n_views, dtype=np.int64)
    vmap[views] = np.arange(len(views))
    sub = obs.subset(mask)
    new_obs = ObservationSet(pmap[sub.point_ids], vmap[sub.view_ids], sub.lens_ids, sub.xy)
    cons = [ScaleConstraint(int(pmap[c.point_a]), int(pmap[c.point_b]), c.distance, c.weight)
            for c in ds.scale_constraints if pmap[c.point_a] >= 0 and pmap[c.point_b] >= 0]
    clean = ds.noiseless_xy[mask] if ds.noiseless_xy is not None else None
    return SyntheticDataset(ds.intrinsics_gt, ds.grid, [ds.poses_gt[v] for v in views], ds.points_gt[pts],
                            new_obs, cons, clean, None if ds.outlier_mask is None else ds.outlier_mask[mask],
                            ds.nominal_f_L)
