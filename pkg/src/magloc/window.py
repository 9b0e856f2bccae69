"""Sliding measurement window over a traveled-distance horizon.

Each entry keeps the backward relative pose of its frame expressed in the
newest frame, so the window re-expresses the whole accumulated sequence at
the current time: on every push the existing entries are pre-composed with
the inverse of the new odometry increment and entries that have fallen
more than the horizon behind are evicted.
"""

from dataclasses import dataclass

import numpy as np

from .geom import PoseState, RigidTransform, compose, inverse
from .sim import DatasetFrame

# Below these increments a frame replaces the newest entry instead of
# accumulating, so standstill does not pile up duplicate constraints.
STATIONARY_TRANS = 1e-4
STATIONARY_ROT = 1e-4


def regressor(b: np.ndarray) -> np.ndarray:
    """3x12 linear-regression matrix of the affine sensor model.

    Row r carries the reading transposed in columns 3r..3r+2 and a 1 in
    column 9+r, so regressor(B) @ theta == C @ B + b for theta = [rows
    of C, b].
    """
    b = np.asarray(b, dtype=float)
    h = np.zeros((3, 12))
    for r in range(3):
        h[r, 3 * r:3 * r + 3] = b
        h[r, 9 + r] = 1.0
    return h


def regressor_many(b: np.ndarray) -> np.ndarray:
    """regressor() over the last axis of (..., 3), returning (..., 3, 12)."""
    b = np.asarray(b, dtype=float)
    out = np.zeros(b.shape[:-1] + (3, 12))
    for r in range(3):
        out[..., r, 3 * r:3 * r + 3] = b
        out[..., r, 9 + r] = 1.0
    return out


@dataclass
class WindowEntry:
    rel_pose: RigidTransform  # pose of this entry's frame in the newest frame
    regressors: np.ndarray  # (N, 3, 12)
    readings: np.ndarray  # (N, 3) raw
    traveled_dist_from_current: float
    timestamp: float


@dataclass
class WindowSnapshot:
    """Immutable stacked copy of the window state, oldest entry first.

    rel_ext_rotations and body_offsets are the state-independent parts of
    the accumulated sensor poses (relR @ extR and relp + relR @ extp),
    precomputed once so per-iteration pose evaluations reduce to two
    matmuls against the body pose.
    """

    rel_rotations: np.ndarray  # (J, 3, 3)
    rel_translations: np.ndarray  # (J, 3)
    regressors: np.ndarray  # (J, N, 3, 12)
    readings: np.ndarray  # (J, N, 3)
    extrinsic_rotations: np.ndarray  # (N, 3, 3)
    extrinsic_translations: np.ndarray  # (N, 3)
    rel_ext_rotations: np.ndarray  # (J, N, 3, 3)
    body_offsets: np.ndarray  # (J, N, 3)

    def __len__(self):
        return self.rel_rotations.shape[0]

    @property
    def n_sensors(self):
        return self.regressors.shape[1]


class SlidingWindow:
    """Single-writer accumulation buffer; snapshots are safe to share."""

    def __init__(self, horizon_m: float, extrinsics):
        if horizon_m < 0.0:
            raise ValueError("horizon must be non-negative")
        self.horizon_m = float(horizon_m)
        self.extrinsics = list(extrinsics)
        self.entries: list[WindowEntry] = []

    def __len__(self):
        return len(self.entries)

    def push(self, frame: DatasetFrame) -> None:
        """Ingest a frame: shift existing entries backward, then append."""
        if self.entries and frame.t <= self.entries[-1].timestamp:
            raise ValueError(
                f"non-monotone timestamp {frame.t} <= {self.entries[-1].timestamp}")
        dr = frame.odom_rotation()
        dp = np.asarray(frame.odom_dp, dtype=float)
        step_len = float(np.linalg.norm(dp))
        rot_angle = float(np.arccos(np.clip((np.trace(dr) - 1.0) / 2.0, -1.0, 1.0)))
        regressors = np.stack([regressor(b) for b in frame.readings])

        stationary = (self.entries and step_len < STATIONARY_TRANS
                      and rot_angle < STATIONARY_ROT)
        if stationary:
            newest = self.entries[-1]
            newest.regressors = regressors
            newest.readings = np.array(frame.readings, dtype=float)
            newest.timestamp = frame.t
            return

        inv_step = inverse(RigidTransform(dr, dp))
        survivors = []
        for entry in self.entries:
            dist = entry.traveled_dist_from_current + step_len
            if dist > self.horizon_m:
                continue
            survivors.append(WindowEntry(
                rel_pose=compose(inv_step, entry.rel_pose),
                regressors=entry.regressors,
                readings=entry.readings,
                traveled_dist_from_current=dist,
                timestamp=entry.timestamp,
            ))
        survivors.append(WindowEntry(
            rel_pose=RigidTransform.identity(),
            regressors=regressors,
            readings=np.array(frame.readings, dtype=float),
            traveled_dist_from_current=0.0,
            timestamp=frame.t,
        ))
        self.entries = survivors

    def snapshot(self) -> WindowSnapshot:
        if not self.entries:
            raise ValueError("window is empty")
        rel_r = np.stack([e.rel_pose.rotation for e in self.entries])
        rel_p = np.stack([e.rel_pose.translation for e in self.entries])
        ext_r = np.stack([e.rotation for e in self.extrinsics])
        ext_p = np.stack([e.translation for e in self.extrinsics])
        rel_ext_r = np.matmul(rel_r[:, None], ext_r[None, :])
        offsets = rel_p[:, None, :] + np.matmul(
            rel_r[:, None], ext_p[None, :, :, None])[..., 0]
        return WindowSnapshot(
            rel_rotations=rel_r,
            rel_translations=rel_p,
            regressors=np.stack([e.regressors for e in self.entries]),
            readings=np.stack([e.readings for e in self.entries]),
            extrinsic_rotations=ext_r,
            extrinsic_translations=ext_p,
            rel_ext_rotations=rel_ext_r,
            body_offsets=offsets,
        )


def sensor_poses(snap: WindowSnapshot, x: PoseState) -> tuple:
    """World pose of every (entry, sensor) pair under the state x.

    Returns rotations (J, N, 3, 3) and positions (J, N, 3):
        R = R_body @ relR @ extR,  p = R_body @ (relp + relR @ extp) + p_body.
    """
    r_body = x.rotation()
    rotations = np.matmul(r_body, snap.rel_ext_rotations)
    positions = np.matmul(r_body, snap.body_offsets[..., None])[..., 0] + x.position
    return rotations, positions
