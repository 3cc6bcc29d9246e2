"""Focused plenoptic camera model: thin main lens, pinhole micro lenses and
raw-image distortion.

Conventions used throughout the package:

* lengths are millimeters, image coordinates are pixels;
* the homogeneous scale of the main-lens projection is ``z_C``, so
  ``x_V = b_L * x_C / z_C`` and the lateral virtual coordinate in pixels is
  ``x_V' = x_V / s_x + c_x``;
* micro image centers are scaled towards the principal point (not the sensor
  origin) to obtain micro lens centers;
* distortion acts on raw-image coordinates and on the micro image centers,
  micro lens centers are derived from the distorted centers.

The scalar functions (``project_to_virtual`` etc.) raise on invalid input;
:func:`project_points` is the vectorized path used by the solvers and returns
a validity mask plus analytic Jacobians instead of raising.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .errors import DegenerateDepth, NoConvergence, NonPositiveVirtualDepth, OutOfMicroImage
from .geometry import Pose

INTRINSIC_NAMES = ("f_L", "b_L0", "B", "c_x", "c_y", "k0", "k1", "k2", "p0", "p1")
DISTORTION_NAMES = INTRINSIC_NAMES[5:]


@dataclass(frozen=True)
class DistortionCoeffs:
    k0: float = 0.0
    k1: float = 0.0
    k2: float = 0.0
    p0: float = 0.0
    p1: float = 0.0

    def as_array(self):
        return np.array([self.k0, self.k1, self.k2, self.p0, self.p1], dtype=float)

    @classmethod
    def from_array(cls, a):
        return cls(*(float(x) for x in a))

    def is_zero(self):
        return not np.any(self.as_array())


@dataclass(frozen=True)
class PlenopticIntrinsics:
    """Main lens focal length ``f_L``, main-lens-to-MLA distance ``b_L0``,
    MLA-to-sensor distance ``B`` (all mm), principal point (px), pixel pitch
    (mm/px) and raw-image distortion."""

    f_L: float
    b_L0: float
    B: float
    c_x: float
    c_y: float
    s_x: float = 0.0055
    s_y: float = 0.0055
    distortion: DistortionCoeffs = field(default_factory=DistortionCoeffs)

    def __post_init__(self):
        for name in ("f_L", "b_L0", "B", "s_x", "s_y"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.b_L0 < self.f_L:
            raise ValueError(
                f"b_L0={self.b_L0} >= f_L={self.f_L}: only the Galilean configuration is supported"
            )

    def to_vector(self):
        return np.concatenate([[self.f_L, self.b_L0, self.B, self.c_x, self.c_y], self.distortion.as_array()])

    @classmethod
    def from_vector(cls, vec, s_x, s_y):
        vec = np.asarray(vec, dtype=float)
        return cls(*(float(x) for x in vec[:5]), s_x=s_x, s_y=s_y,
                   distortion=DistortionCoeffs.from_array(vec[5:10]))

    @property
    def principal(self):
        return np.array([self.c_x, self.c_y])

    def with_values(self, **kwargs):
        return replace(self, **kwargs)


@dataclass
class MicroLensGrid:
    """Micro image centers ``C_I`` (px) indexed by dense lens ids."""

    centers: np.ndarray
    micro_image_radius: float
    sensor_width: int
    sensor_height: int

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=float).reshape(-1, 2)
        if not self.micro_image_radius > 0:
            raise ValueError("micro_image_radius must be positive")
        c = self.centers
        if len(c) and (c.min() < 0 or np.any(c[:, 0] > self.sensor_width) or np.any(c[:, 1] > self.sensor_height)):
            raise ValueError("micro image centers must lie within the sensor")

    @property
    def num_lenses(self):
        return len(self.centers)

    @staticmethod
    def default_radius(centers):
        """Half the nearest-neighbour spacing minus a one pixel margin."""
        from scipy.spatial import cKDTree

        centers = np.asarray(centers, dtype=float)
        if len(centers) < 2:
            raise ValueError("need at least two centers to derive a radius")
        d, _ = cKDTree(centers).query(centers, k=2)
        return 0.5 * float(np.median(d[:, 1])) - 1.0

    def as_records(self):
        return [[i, float(x), float(y)] for i, (x, y) in enumerate(self.centers)]

    @classmethod
    def from_records(cls, records, radius, width, height):
        records = sorted(records, key=lambda r: int(r[0]))
        ids = [int(r[0]) for r in records]
        if ids != list(range(len(ids))):
            raise ValueError("lens ids must be unique and dense in [0, L)")
        return cls(np.array([[r[1], r[2]] for r in records], dtype=float), radius, width, height)


class VirtualPoint(NamedTuple):
    x: float
    y: float
    v: float


# --- scalar operations -----------------------------------------------------


def main_lens_image_distance(intr, z_C):
    """Thin-lens image distance ``b_L`` for an object at depth ``z_C``."""
    if np.isinf(z_C):
        return float(intr.f_L)
    if not z_C > intr.f_L:
        raise DegenerateDepth(f"z_C={z_C} must exceed f_L={intr.f_L}")
    return 1.0 / (1.0 / intr.f_L - 1.0 / z_C)


def project_to_virtual(intr, X_C):
    x, y, z = (float(a) for a in X_C)
    b_L = main_lens_image_distance(intr, z)
    v = (b_L - intr.b_L0) / intr.B
    if not v > 0:
        raise NonPositiveVirtualDepth(f"virtual depth {v} <= 0")
    return VirtualPoint(b_L * x / z / intr.s_x + intr.c_x, b_L * y / z / intr.s_y + intr.c_y, v)


def micro_lens_centers(intr, grid, distorted=True):
    """Lateral micro lens centers ``C_ML`` in pixels, shape (L, 2).

    The lens plane sits at ``b_L0`` from the main lens; the scaling
    ``b_L0 / (b_L0 + B)`` is a central projection through the main lens
    center and therefore acts on coordinates relative to the principal point.
    """
    c = intr.principal
    centers = grid.centers
    if distorted:
        centers = distort(intr.distortion, c, centers)
    return c + (centers - c) * (intr.b_L0 / (intr.b_L0 + intr.B))


def project_virtual_to_raw(vp, c_ML):
    if vp.v == 0:
        raise NonPositiveVirtualDepth("virtual depth is zero")
    c_ML = np.asarray(c_ML, dtype=float)
    return (np.array([vp.x, vp.y]) - c_ML) / vp.v + c_ML


def distort(coeffs, principal, X_R):
    """Map undistorted raw coordinates to distorted ones (any leading shape)."""
    kp = coeffs.as_array() if isinstance(coeffs, DistortionCoeffs) else np.asarray(coeffs, dtype=float)
    X_R = np.asarray(X_R, dtype=float)
    d, _, _ = _distortion_terms(X_R.reshape(-1, 2), np.asarray(principal, dtype=float), kp, jac=False)
    return (X_R.reshape(-1, 2) + d).reshape(X_R.shape)


def undistort(coeffs, principal, X_Rd, tol=1e-9, max_iter=50, return_mask=False):
    """Invert :func:`distort` by Newton iteration started at the distorted point.

    Raises :class:`NoConvergence` if any point fails to reach ``tol`` pixels
    unless ``return_mask`` is set, in which case the convergence mask is
    returned alongside the result.
    """
    kp = coeffs.as_array() if isinstance(coeffs, DistortionCoeffs) else np.asarray(coeffs, dtype=float)
    c = np.asarray(principal, dtype=float)
    target = np.asarray(X_Rd, dtype=float)
    shape = target.shape
    target = target.reshape(-1, 2)
    x = target.copy()
    done = np.zeros(len(x), dtype=bool)
    if not np.any(kp):
        done[:] = True
    for _ in range(max_iter):
        if done.all():
            break
        act = ~done
        d, J, _ = _distortion_terms(x[act], c, kp, jac=True)
        err = x[act] + d - target[act]
        converged = np.linalg.norm(err, axis=1) < tol
        idx = np.flatnonzero(act)
        done[idx[converged]] = True
        upd = ~converged
        if not upd.any():
            break
        Jp = J[upd] + np.eye(2)
        det = Jp[:, 0, 0] * Jp[:, 1, 1] - Jp[:, 0, 1] * Jp[:, 1, 0]
        bad = np.abs(det) < 1e-12
        det = np.where(bad, 1.0, det)
        e = err[upd]
        step = np.stack([Jp[:, 1, 1] * e[:, 0] - Jp[:, 0, 1] * e[:, 1],
                         -Jp[:, 1, 0] * e[:, 0] + Jp[:, 0, 0] * e[:, 1]], axis=1) / det[:, None]
        step[bad] = 0.0
        x[idx[upd]] -= step
    else:
        d, _, _ = _distortion_terms(x, c, kp, jac=False)
        done = np.linalg.norm(x + d - target, axis=1) < tol
    if not done.all():
        d, _, _ = _distortion_terms(x, c, kp, jac=False)
        done = np.linalg.norm(x + d - target, axis=1) < tol
    if return_mask:
        return x.reshape(shape), done.reshape(shape[:-1])
    if not done.all():
        raise NoConvergence(f"{int((~done).sum())} point(s) did not converge in {max_iter} iterations")
    return x.reshape(shape)


def check_invertible(coeffs, principal, width, height, samples=64):
    """Return True if the distortion Jacobian keeps a positive determinant over
    a ``samples x samples`` grid covering the sensor (local diffeomorphism)."""
    kp = coeffs.as_array() if isinstance(coeffs, DistortionCoeffs) else np.asarray(coeffs, dtype=float)
    xs = np.linspace(0, width, samples)
    ys = np.linspace(0, height, samples)
    pts = np.stack(np.meshgrid(xs, ys), axis=-1).reshape(-1, 2)
    _, J, _ = _distortion_terms(pts, np.asarray(principal, dtype=float), kp, jac=True)
    Jp = J + np.eye(2)
    det = Jp[:, 0, 0] * Jp[:, 1, 1] - Jp[:, 0, 1] * Jp[:, 1, 0]
    return bool(np.all(det > 0))


def project_full(intr, grid, pose, X_W, lens_id):
    """Project a world point into micro image ``lens_id``; returns ``X_Rd`` (px).

    Raises :class:`OutOfMicroImage` when the projection falls outside the
    micro image disk around the distorted micro image center.
    """
    X_C = pose.transform(np.asarray(X_W, dtype=float))
    vp = project_to_virtual(intr, X_C)
    if not vp.v > 1:
        raise NonPositiveVirtualDepth(f"virtual depth {vp.v} <= 1")
    c = intr.principal
    c_Id = distort(intr.distortion, c, grid.centers[lens_id])
    c_ML = c + (c_Id - c) * (intr.b_L0 / (intr.b_L0 + intr.B))
    X_R = project_virtual_to_raw(vp, c_ML)
    X_Rd = distort(intr.distortion, c, X_R)
    if np.linalg.norm(X_Rd - c_Id) > grid.micro_image_radius:
        raise OutOfMicroImage(f"projection outside micro image {lens_id}")
    return X_Rd


# --- vectorized core -------------------------------------------------------


def _distortion_terms(xy, c, kp, jac=True):
    """Distortion offset ``d`` with Jacobians w.r.t. the point and coefficients.

    Returns ``d`` (n, 2), ``J_pt`` (n, 2, 2) = d d / d xy and ``J_kp``
    (n, 2, 5). The Jacobian w.r.t. the principal point is ``-J_pt``.
    """
    k0, k1, k2, p0, p1 = kp
    xp = xy[..., 0] - c[..., 0]
    yp = xy[..., 1] - c[..., 1]
    r2 = xp * xp + yp * yp
    g = r2 * (k0 + r2 * (k1 + r2 * k2))
    d = np.stack([xp * g + p0 * (r2 + 2 * xp * xp) + 2 * p1 * xp * yp,
                  yp * g + p1 * (r2 + 2 * yp * yp) + 2 * p0 * xp * yp], axis=-1)
    if not jac:
        return d, None, None
    gp = k0 + r2 * (2 * k1 + 3 * k2 * r2)
    xy2 = 2 * xp * yp * gp
    J_pt = np.empty(xp.shape + (2, 2))
    J_pt[..., 0, 0] = g + 2 * xp * xp * gp + 6 * p0 * xp + 2 * p1 * yp
    J_pt[..., 0, 1] = xy2 + 2 * p0 * yp + 2 * p1 * xp
    J_pt[..., 1, 0] = xy2 + 2 * p1 * xp + 2 * p0 * yp
    J_pt[..., 1, 1] = g + 2 * yp * yp * gp + 6 * p1 * yp + 2 * p0 * xp
    r4 = r2 * r2
    J_kp = np.empty(xp.shape + (2, 5))
    J_kp[..., 0, 0] = xp * r2
    J_kp[..., 0, 1] = xp * r4
    J_kp[..., 0, 2] = xp * r4 * r2
    J_kp[..., 1, 0] = yp * r2
    J_kp[..., 1, 1] = yp * r4
    J_kp[..., 1, 2] = yp * r4 * r2
    J_kp[..., 0, 3] = r2 + 2 * xp * xp
    J_kp[..., 1, 3] = 2 * xp * yp
    J_kp[..., 0, 4] = 2 * xp * yp
    J_kp[..., 1, 4] = r2 + 2 * yp * yp
    return d, J_pt, J_kp


def _left_mul2(M, J):
    """Batched ``M @ J`` for (n, 2, 2) ``M``; faster than einsum for tiny blocks."""
    return M[:, :, 0, None] * J[:, None, 0, :] + M[:, :, 1, None] * J[:, None, 1, :]


class Projection(NamedTuple):
    pred: np.ndarray  # (n, 2) distorted raw coordinates
    valid: np.ndarray  # (n,) z_C > f_L and v > 1
    J_intr: np.ndarray | None  # (n, 2, 10)
    J_cam: np.ndarray | None  # (n, 2, 3) w.r.t. camera-frame point


def project_camera_points(theta, s_x, s_y, X_C, C_I, jac=True, lens_idx=None):
    """Vectorized ``X_C -> X_Rd`` for intrinsics vector ``theta`` (see
    ``INTRINSIC_NAMES``) and per-observation micro image centers ``C_I``.

    If ``lens_idx`` is given, ``C_I`` holds one row per micro lens and is
    gathered per observation after distorting it once per lens."""
    f, b0, B, cx, cy = theta[:5]
    kp = theta[5:10]
    c = np.array([cx, cy])
    X_C = np.asarray(X_C, dtype=float)
    n = len(X_C)
    x, y, z = X_C[:, 0], X_C[:, 1], X_C[:, 2]
    valid = z > f * (1 + 1e-12)
    zs = np.where(valid, z, 2 * f + 1.0)
    den = zs - f
    m = f / den
    bL = m * zs
    v = (bL - b0) / B
    valid &= v > 1
    v = np.where(valid, v, 2.0)
    u = 1.0 / v
    xv = m * x / s_x + cx
    yv = m * y / s_y + cy

    dci, Jci_pt, Jci_kp = _distortion_terms(C_I, c, kp, jac=jac)
    c_Id = C_I + dci
    if lens_idx is not None:
        c_Id = c_Id[lens_idx]
        if jac:
            Jci_pt = Jci_pt[lens_idx]
            Jci_kp = Jci_kp[lens_idx]
    sig = b0 / (b0 + B)
    c_ML = c + sig * (c_Id - c)
    V = np.stack([xv, yv], axis=1)
    X_R = V * u[:, None] + c_ML * (1 - u)[:, None]
    dr, T, Jr_kp = _distortion_terms(X_R, c, kp, jac=jac)
    pred = X_R + dr
    if not jac:
        return Projection(pred, valid, None, None)

    diff = V - c_ML  # (n, 2)
    den2 = den * den
    dm_dz = -f / den2
    dm_df = zs / den2
    dbL_dz = -f * f / den2
    dbL_df = zs * zs / den2
    u2 = u * u

    # d X_R / d intrinsics, (n, 2, 10)
    dXR = np.zeros((n, 2, 10))
    du_df = -u2 * dbL_df / B
    dXR[:, 0, 0] = u * x / s_x * dm_df + diff[:, 0] * du_df
    dXR[:, 1, 0] = u * y / s_y * dm_df + diff[:, 1] * du_df
    denom = (b0 + B) ** 2
    rel = c_Id - c
    dcml_db0 = rel * (B / denom)
    dcml_dB = -rel * (b0 / denom)
    omu = (1 - u)[:, None]
    dXR[:, :, 1] = omu * dcml_db0 + diff * (u2 / B)[:, None]
    dXR[:, :, 2] = omu * dcml_dB + diff * (u / B)[:, None]
    # d c_Id / d c = -Jci_pt
    dcml_dc = (1 - sig) * np.eye(2) - sig * Jci_pt
    dXR[:, :, 3:5] = omu[:, :, None] * dcml_dc
    dXR[:, 0, 3] += u
    dXR[:, 1, 4] += u
    dXR[:, :, 5:10] = (omu * sig)[:, :, None] * Jci_kp

    Tp = T + np.eye(2)
    J_intr = _left_mul2(Tp, dXR)
    J_intr[:, :, 3:5] -= T
    J_intr[:, :, 5:10] += Jr_kp

    dXR_dXC = np.zeros((n, 2, 3))
    du_dz = -u2 * dbL_dz / B
    dXR_dXC[:, 0, 0] = u * m / s_x
    dXR_dXC[:, 1, 1] = u * m / s_y
    dXR_dXC[:, 0, 2] = u * x / s_x * dm_dz + diff[:, 0] * du_dz
    dXR_dXC[:, 1, 2] = u * y / s_y * dm_dz + diff[:, 1] * du_dz
    J_cam = _left_mul2(Tp, dXR_dXC)
    return Projection(pred, valid, J_intr, J_cam)


def project_points(theta, s_x, s_y, R, t, X_W, C_I, jac=True, lens_idx=None):
    """World points through per-observation poses ``R`` (n,3,3), ``t`` (n,3).

    Returns ``(pred, valid, J_intr, J_pose, J_point)``; the pose Jacobian is
    w.r.t. the left perturbation ``[omega, dt]`` with
    ``X_C = exp(omega) R X_W + t + dt``.
    """
    RX = (R * X_W[:, None, :]).sum(axis=2)
    X_C = RX + t
    p = project_camera_points(theta, s_x, s_y, X_C, C_I, jac=jac, lens_idx=lens_idx)
    if not jac:
        return p.pred, p.valid, None, None, None
    Jc = p.J_cam
    # d X_C / d omega = -[RX]_x, i.e. columns (J x RX) per row
    Jrot = np.cross(RX[:, None, :], Jc)
    J_pose = np.concatenate([Jrot, Jc], axis=2)
    J_point = Jc[:, :, 0, None] * R[:, None, 0, :] + Jc[:, :, 1, None] * R[:, None, 1, :] \
        + Jc[:, :, 2, None] * R[:, None, 2, :]
    return p.pred, p.valid, p.J_intr, J_pose, J_point


def project_pose(intr, grid, pose: Pose, X_W, lens_ids):
    """Vectorized projection of many (point, lens) pairs through one pose
    without visibility checks; returns ``(pred, valid)``."""
    X_W = np.asarray(X_W, dtype=float).reshape(-1, 3)
    X_C = pose.transform(X_W)
    p = project_camera_points(intr.to_vector(), intr.s_x, intr.s_y, X_C,
                              grid.centers[np.asarray(lens_ids)], jac=False)
    return p.pred, p.valid
