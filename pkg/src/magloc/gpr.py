"""Gaussian-process regression of the magnetic field from fingerprints.

Three independent per-axis GPs share one RBF kernel; the mean function is
the per-axis average of the training fields (the local background field).
Only the posterior mean is used downstream: predictions are rasterized
into the dense grid map that the estimator queries.
"""

import csv
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.spatial import cKDTree

from .errors import DegenerateTrainingError
from .magmap import MagneticGridMap

# Exact GPR only; larger training sets need an approximate method.
MAX_TRAINING_POINTS = 5000

MIN_PAIRWISE_DISTANCE = 1e-6


@dataclass
class Fingerprint:
    """One training sample: position in meters, field in uT."""

    position: np.ndarray
    field: np.ndarray


@dataclass
class KernelParams:
    lengthscale: float = 1.0  # meters
    signal_var: float = 25.0  # uT^2
    noise_var: float = 0.04  # uT^2

    def __post_init__(self):
        if self.lengthscale <= 0.0 or self.signal_var <= 0.0 or self.noise_var < 0.0:
            raise ValueError("kernel parameters must be positive (noise_var >= 0)")


def rbf_kernel(pj: np.ndarray, pk: np.ndarray, params: KernelParams) -> float:
    d2 = float(np.sum((np.asarray(pj, float) - np.asarray(pk, float))**2))
    return params.signal_var * float(np.exp(-d2 / (2.0 * params.lengthscale**2)))


def _kernel_matrix(a: np.ndarray, b: np.ndarray, params: KernelParams) -> np.ndarray:
    d2 = np.sum((a[:, None, :] - b[None, :, :])**2, axis=-1)
    return params.signal_var * np.exp(-d2 / (2.0 * params.lengthscale**2))


@dataclass
class GprModel:
    train_pos: np.ndarray  # (n, 3)
    alpha: np.ndarray  # (n, 3) per-axis weights
    mean: np.ndarray  # (3,) uT
    params: KernelParams


def fit(fingerprints, params: KernelParams) -> GprModel:
    """Fit per-axis GPs: solve (K + noise_var*I) alpha = B - mean.

    Positions must be pairwise distinct; a singular factorization is
    retried once with a small jitter before giving up.
    """
    if len(fingerprints) == 0:
        raise DegenerateTrainingError("need at least one fingerprint")
    if len(fingerprints) > MAX_TRAINING_POINTS:
        raise DegenerateTrainingError(
            f"{len(fingerprints)} fingerprints exceed the exact-GPR cap "
            f"of {MAX_TRAINING_POINTS}")
    pos = np.array([f.position for f in fingerprints], dtype=float)
    fields = np.array([f.field for f in fingerprints], dtype=float)
    if len(pos) > 1:
        dist, _ = cKDTree(pos).query(pos, k=2)
        if float(np.min(dist[:, 1])) <= MIN_PAIRWISE_DISTANCE:
            raise DegenerateTrainingError("duplicate fingerprint positions")
    mean = fields.mean(axis=0)
    rhs = fields - mean
    k = _kernel_matrix(pos, pos, params)
    k[np.diag_indices_from(k)] += params.noise_var
    try:
        factor = cho_factor(k, lower=True)
    except np.linalg.LinAlgError:
        k[np.diag_indices_from(k)] += 1e-8 * params.signal_var
        try:
            factor = cho_factor(k, lower=True)
        except np.linalg.LinAlgError as exc:
            raise DegenerateTrainingError(
                "kernel matrix not positive definite even with jitter") from exc
    alpha = cho_solve(factor, rhs)
    resid = np.linalg.norm(k @ alpha - rhs)
    if resid > 1e-8 * max(np.linalg.norm(rhs), 1.0):
        raise DegenerateTrainingError(
            f"weight solve residual {resid:.3e} too large")
    return GprModel(pos, alpha, mean, params)


def predict_many(model: GprModel, points: np.ndarray) -> np.ndarray:
    """Posterior-mean field at (m, 3) query points, returning (m, 3)."""
    points = np.asarray(points, dtype=float)
    kstar = _kernel_matrix(points, model.train_pos, model.params)
    return model.mean + kstar @ model.alpha


def predict(model: GprModel, p: np.ndarray) -> np.ndarray:
    return predict_many(model, np.asarray(p, dtype=float)[None, :])[0]


def build_grid(model: GprModel, origin, resolution: float, nx: int, ny: int,
               plane_height: float = 0.0) -> MagneticGridMap:
    """Rasterize GP predictions into a dense grid map."""
    origin = np.asarray(origin, dtype=float)
    xs = origin[0] + resolution * np.arange(nx)
    ys = origin[1] + resolution * np.arange(ny)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    nodes = np.stack([gx.ravel(), gy.ravel(),
                      np.full(nx * ny, float(plane_height))], axis=-1)
    values = predict_many(model, nodes).reshape(nx, ny, 3)
    return MagneticGridMap(origin, float(resolution), nx, ny, values,
                           float(plane_height))


def write_fingerprints_csv(fingerprints, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["x", "y", "z", "bx", "by", "bz"])
        for fp in fingerprints:
            writer.writerow([repr(float(v)) for v in (*fp.position, *fp.field)])


def read_fingerprints_csv(path) -> list:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["x", "y", "z", "bx", "by", "bz"]:
            raise DegenerateTrainingError(f"unexpected fingerprint header {header}")
        out = []
        for row in reader:
            vals = [float(v) for v in row]
            if len(vals) != 6:
                raise DegenerateTrainingError(f"bad fingerprint row {row}")
            out.append(Fingerprint(np.array(vals[:3]), np.array(vals[3:])))
    return out
