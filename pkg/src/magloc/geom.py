"""Rotation and rigid-transform primitives.

Orientation is carried as an axis-angle 3-vector (rotation vector) and
converted to a 3x3 matrix at use sites, keeping the pose state
6-dimensional.  Pose perturbations apply the translation additively in the
world frame and the rotation as a right-multiplied exponential.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

# Below this angle Rodrigues terms switch to their second-order Taylor
# expansions to avoid 0/0.
SMALL_ANGLE = 1e-8


def skew(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that skew(v) @ w == cross(v, w)."""
    x, y, z = v
    return np.array([
        [0.0, -z, y],
        [z, 0.0, -x],
        [-y, x, 0.0],
    ])


def skew_many(v: np.ndarray) -> np.ndarray:
    """skew() over the last axis of a (..., 3) array, returning (..., 3, 3)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def exp_so3(phi: np.ndarray) -> np.ndarray:
    """Rodrigues formula mapping a rotation vector to a rotation matrix."""
    phi = np.asarray(phi, dtype=float)
    angle = float(np.linalg.norm(phi))
    s = skew(phi)
    if angle < SMALL_ANGLE:
        return np.eye(3) + s + 0.5 * (s @ s)
    a = np.sin(angle) / angle
    b = (1.0 - np.cos(angle)) / (angle * angle)
    return np.eye(3) + a * s + b * (s @ s)


def log_so3(r: np.ndarray) -> np.ndarray:
    """Principal-branch rotation vector of a rotation matrix (norm <= pi)."""
    r = np.asarray(r, dtype=float)
    trace = float(np.trace(r))
    cos_angle = np.clip(0.5 * (trace - 1.0), -1.0, 1.0)
    angle = float(np.arccos(cos_angle))
    # sin(angle)-scaled antisymmetric part; valid away from angle ~ pi.
    w = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if angle < SMALL_ANGLE:
        return w
    if np.pi - angle < 1e-4:
        # Near the pi branch the antisymmetric part vanishes; recover the
        # axis from the dominant diagonal of (R + I) / 2 instead.
        log.debug("log_so3 taking the stabilized pi-branch (angle=%.6f)", angle)
        diag = np.diag(r)
        k = int(np.argmax(diag))
        axis = np.zeros(3)
        axis[k] = np.sqrt(max(0.0, (diag[k] + 1.0) * 0.5))
        denom = 2.0 * axis[k]
        for j in range(3):
            if j != k:
                axis[j] = (r[k, j] + r[j, k]) / (2.0 * denom)
        axis /= np.linalg.norm(axis)
        # Fix the sign so the result stays consistent with the antisymmetric
        # part when it has not fully vanished.
        if np.dot(axis, w) < 0.0:
            axis = -axis
        return axis * angle
    return w * (angle / np.sin(angle))


@dataclass
class RigidTransform:
    """Rotation + translation; maps points as rotation @ p + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return RigidTransform(a.rotation @ b.rotation,
                          a.rotation @ b.translation + a.translation)


def inverse(a: RigidTransform) -> RigidTransform:
    rt = a.rotation.T
    return RigidTransform(rt.copy(), -(rt @ a.translation))


@dataclass
class PoseState:
    """Robot pose: world position and axis-angle orientation."""

    position: np.ndarray
    orientation: np.ndarray  # rotation vector, radians

    @staticmethod
    def identity() -> "PoseState":
        return PoseState(np.zeros(3), np.zeros(3))

    def rotation(self) -> np.ndarray:
        return exp_so3(self.orientation)

    def copy(self) -> "PoseState":
        return PoseState(self.position.copy(), self.orientation.copy())


@dataclass
class PosePerturbation:
    """Manifold increment [dp, dphi] applied through boxplus."""

    dp: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dphi: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def norm_translation(self) -> float:
        return float(np.linalg.norm(self.dp))

    def norm_rotation(self) -> float:
        return float(np.linalg.norm(self.dphi))


def boxplus(x: PoseState, dx: PosePerturbation) -> PoseState:
    """Apply a perturbation: p += dp, R <- R @ exp(dphi), re-encoded."""
    position = x.position + dx.dp
    if not np.any(dx.dphi):
        return PoseState(position, x.orientation.copy())
    r = x.rotation() @ exp_so3(dx.dphi)
    return PoseState(position, log_so3(r))
