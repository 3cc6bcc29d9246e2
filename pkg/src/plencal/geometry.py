"""Rigid-body poses and small rotation helpers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation


def skew(v):
    """Cross-product matrices for one vector (3,) or a stack (n, 3)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def quat_to_matrix(q):
    """Rotation matrices from scalar-last quaternions, shape (..., 4) -> (..., 3, 3)."""
    q = np.asarray(q, dtype=float)
    return Rotation.from_quat(q.reshape(-1, 4)).as_matrix().reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(R):
    R = np.asarray(R, dtype=float)
    q = Rotation.from_matrix(R.reshape(-1, 3, 3)).as_quat().reshape(R.shape[:-2] + (4,))
    return canonical_quat(q)


def canonical_quat(q):
    """Normalize and flip sign so that the scalar part is non-negative."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    sign = np.where(q[..., 3:4] < 0, -1.0, 1.0)
    return q * sign


def rotate_left(q, omega):
    """Apply exp(omega) on the left of the rotations q (scalar-last)."""
    r = Rotation.from_rotvec(np.asarray(omega, dtype=float).reshape(-1, 3)) * Rotation.from_quat(
        np.asarray(q, dtype=float).reshape(-1, 4)
    )
    return canonical_quat(r.as_quat()).reshape(np.shape(q))


@dataclass(frozen=True)
class Pose:
    """Camera-from-world rigid transform ``X_C = R X_W + t`` (translation in mm).

    ``rotation`` is a unit quaternion stored scalar-last ``(qx, qy, qz, qw)``.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=float).reshape(4)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"quaternion norm {n} is not 1 within 1e-9")
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, R, t):
        return cls(matrix_to_quat(R), np.asarray(t, dtype=float))

    @property
    def R(self):
        return quat_to_matrix(self.rotation)

    def transform(self, X):
        X = np.asarray(X, dtype=float)
        return X @ self.R.T + self.translation

    def inverse(self):
        Rt = self.R.T
        return Pose.from_matrix(Rt, -Rt @ self.translation)

    def compose(self, other):
        """``self * other``: apply ``other`` first."""
        R = self.R @ other.R
        return Pose.from_matrix(R, self.R @ other.translation + self.translation)

    def center(self):
        """Camera position in world coordinates."""
        return -self.R.T @ self.translation

    def as_matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T


def stack_poses(poses):
    q = np.array([p.rotation for p in poses], dtype=float).reshape(-1, 4)
    t = np.array([p.translation for p in poses], dtype=float).reshape(-1, 3)
    return q, t


def unstack_poses(q, t):
    q = canonical_quat(q)
    return [Pose(qi, ti) for qi, ti in zip(q, t)]
