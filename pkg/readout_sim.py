"""
Readout Simulation - tri-modal Gaussian single-shot qutrit readout

Handles:
- Sampling integrated (u, v) readout points for prepared qutrit states
- Labeled (closed-form) and unlabeled (EM) mixture fits
- Nearest-center classification and assignment matrices, sampled or exact
- Joint two-qutrit assignment matrices and inversion-based mitigation
- Equilateral geometries tuned to a target error, and slow center drift between calibration and use
"""

import csv
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import brentq
from scipy.special import owens_t
from scipy.stats import norm
from sklearn.exceptions import ConvergenceWarning
from sklearn.mixture import GaussianMixture

from errors import DimensionError, DomainError, FitError, MitigationError
from quantum_core import QUTRIT_LEVELS

logger = logging.getLogger(__name__)

CONDITION_LIMIT = 1e6
EM_TOLERANCE = 1e-9
EM_MAX_ITER = 500


@dataclass(frozen=True)
class TriModalModel:
    """
    Three Gaussian modes in the (u, v) plane, one per qutrit level.

    `centers` generate the shots; `decision_centers` are what the classifier
    was calibrated on. They coincide unless the readout has drifted.
    """
    centers: np.ndarray
    covariance: np.ndarray
    weights: np.ndarray = field(default_factory=lambda: np.full(3, 1 / 3))
    decision_centers: Optional[np.ndarray] = None
    fit_history: Tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        centers = np.array(self.centers, dtype=float)
        if centers.shape != (3, 2):
            raise DimensionError(f"Expected three 2-D mode centers, got shape {centers.shape}")
        cov = np.array(self.covariance, dtype=float)
        if cov.shape not in ((2, 2), (3, 2, 2)):
            raise DimensionError(f"Covariance must be 2x2 or 3x2x2, got {cov.shape}")
        for c in cov.reshape(-1, 2, 2):
            if not np.allclose(c, c.T) or np.linalg.eigvalsh(c).min() < -1e-12:
                raise DomainError("Mode covariance must be symmetric positive semidefinite")
        weights = np.array(self.weights, dtype=float)
        if weights.shape != (3,) or np.any(weights < 0) or abs(weights.sum() - 1) > 1e-9:
            raise DomainError(f"Mode weights must be three probabilities summing to 1, got {weights}")
        decision = centers if self.decision_centers is None else np.array(self.decision_centers, dtype=float)
        for pts in (centers, decision):
            gaps = [np.linalg.norm(pts[i] - pts[j]) for i in range(3) for j in range(i + 1, 3)]
            if min(gaps) == 0:
                raise DomainError("Mode centers must be distinct")
        object.__setattr__(self, 'centers', centers)
        object.__setattr__(self, 'covariance', cov)
        object.__setattr__(self, 'weights', weights)
        object.__setattr__(self, 'decision_centers', decision)

    def mode_covariance(self, index: int) -> np.ndarray:
        return self.covariance if self.covariance.ndim == 2 else self.covariance[index]

    @classmethod
    def isotropic(cls, centers, sigma: float) -> 'TriModalModel':
        return cls(np.asarray(centers, dtype=float), sigma ** 2 * np.eye(2))


@dataclass(frozen=True)
class AssignmentMatrix:
    """R[i, j] = P(assigned j | prepared i)."""
    entries: np.ndarray
    shot_counts: Tuple[int, ...] = ()

    def __post_init__(self):
        entries = np.array(self.entries, dtype=float)
        n = entries.shape[0]
        if entries.ndim != 2 or entries.shape != (n, n) or n not in (3, 9):
            raise DimensionError(f"Assignment matrix must be 3x3 or 9x9, got {entries.shape}")
        if np.any(entries < -1e-15) or np.any(entries > 1 + 1e-15):
            raise DomainError("Assignment probabilities must lie in [0, 1]")
        if np.max(np.abs(entries.sum(axis=1) - 1)) > 1e-12:
            raise DomainError("Assignment matrix rows must sum to 1")
        entries.setflags(write=False)
        object.__setattr__(self, 'entries', entries)
        object.__setattr__(self, 'shot_counts', tuple(int(c) for c in self.shot_counts))

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @property
    def average_error(self) -> float:
        return float(1 - np.mean(np.diag(self.entries)))

    @property
    def condition_number(self) -> float:
        return float(np.linalg.cond(self.entries))

    @property
    def labels(self):
        if self.dim == 3:
            return list(QUTRIT_LEVELS)
        return [a + b for a in QUTRIT_LEVELS for b in QUTRIT_LEVELS]

    def to_dict(self) -> dict:
        return {
            'labels': self.labels,
            'entries': self.entries.tolist(),
            'shot_counts': list(self.shot_counts),
            'average_error': self.average_error,
            'condition_number': self.condition_number,
        }


@dataclass(frozen=True)
class MitigatedPopulations:
    values: np.ndarray
    condition_number: float
    has_negative: bool


def _level_index(prepared: Union[int, str]) -> int:
    if isinstance(prepared, str):
        if prepared not in QUTRIT_LEVELS:
            raise ValueError(f"Unknown qutrit level '{prepared}'")
        return QUTRIT_LEVELS.index(prepared)
    index = int(prepared)
    if index not in (0, 1, 2):
        raise ValueError(f"Qutrit level index must be 0, 1 or 2, got {prepared}")
    return index


def sample_shots(model: TriModalModel, prepared, n: int, seed) -> np.ndarray:
    """
    n readout points for a prepared level ('g'/'e'/'f' or 0..2), or for a
    population vector over the three levels. Deterministic given seed.
    """
    if n <= 0:
        raise ValueError(f"Number of shots must be positive, got {n}")
    rng = np.random.default_rng(seed)
    if isinstance(prepared, (str, int, np.integer)):
        index = _level_index(prepared)
        return rng.multivariate_normal(model.centers[index], model.mode_covariance(index), size=n)
    populations = np.clip(np.asarray(prepared, dtype=float), 0, None)
    levels = rng.choice(3, size=n, p=populations / populations.sum())
    points = np.empty((n, 2))
    for index in range(3):
        mask = levels == index
        if mask.any():
            points[mask] = rng.multivariate_normal(model.centers[index], model.mode_covariance(index),
                                                   size=int(mask.sum()))
    return points


def _check_spread(points: np.ndarray):
    cov = np.cov(points.T)
    scale = np.trace(cov)
    if scale <= 0 or np.linalg.det(cov) <= 1e-12 * scale ** 2:
        raise FitError("Readout points are collinear; covariance is degenerate")


def _pooled(points: np.ndarray, labels: np.ndarray, per_mode: bool):
    centers = np.array([points[labels == k].mean(axis=0) for k in range(3)])
    resid = points - centers[labels]
    if per_mode:
        covs = np.array([np.cov(resid[labels == k].T, bias=True) for k in range(3)])
        for c in covs:
            if np.linalg.det(c) <= 1e-12 * np.trace(c) ** 2:
                raise FitError("Degenerate per-mode covariance (collinear points)")
        return centers, covs
    cov = resid.T @ resid / len(points)
    if np.linalg.det(cov) <= 1e-12 * np.trace(cov) ** 2:
        raise FitError("Degenerate pooled covariance (collinear points)")
    return centers, cov


def fit_trimodal(points, labels: Optional[Sequence[int]] = None, initial_centers=None,
                 per_mode: bool = False, tol: float = EM_TOLERANCE,
                 max_iter: int = EM_MAX_ITER) -> TriModalModel:
    """
    Maximum-likelihood tri-modal fit.

    With labels the fit is closed form (per-label means, pooled covariance).
    Without labels, EM runs one iteration at a time so the log-likelihood
    can be tracked; it stops when the relative change drops below `tol`.
    Components follow `initial_centers` order when given, otherwise they
    are ordered by polar angle about the data centroid.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != 2:
        raise DimensionError(f"Readout points must be (N, 2), got {points.shape}")

    if labels is not None:
        labels = np.asarray(labels, dtype=int)
        counts = np.bincount(labels, minlength=3)
        if len(counts) != 3 or counts.min() < 10:
            raise FitError(f"Labeled fit needs at least 10 points per mode, got {counts.tolist()}")
        centers, cov = _pooled(points, labels, per_mode)
        return TriModalModel(centers, cov, counts / counts.sum())

    if len(points) < 100:
        raise FitError(f"Unlabeled fit needs at least 100 points, got {len(points)}")
    _check_spread(points)

    gmm = GaussianMixture(n_components=3, covariance_type='full' if per_mode else 'tied',
                          max_iter=1, warm_start=True, reg_covar=1e-12,
                          means_init=None if initial_centers is None else np.asarray(initial_centers, dtype=float),
                          random_state=0)
    history = []
    with warnings.catch_warnings():
        warnings.simplefilter('ignore', ConvergenceWarning)
        for _ in range(max_iter):
            gmm.fit(points)
            history.append(float(gmm.score(points) * len(points)))
            if len(history) > 1 and abs(history[-1] - history[-2]) <= tol * abs(history[-2]):
                break
        else:
            logger.warning("EM stopped after %d iterations without reaching tolerance %.1g", max_iter, tol)
    logger.debug("EM converged in %d iterations, log-likelihood %.6f", len(history), history[-1])

    means = gmm.means_
    if initial_centers is None:
        centroid = points.mean(axis=0)
        order = np.argsort(np.arctan2(means[:, 1] - centroid[1], means[:, 0] - centroid[0]))
    else:
        order = np.arange(3)
    cov = gmm.covariances_ if not per_mode else gmm.covariances_[order]
    return TriModalModel(means[order], cov, gmm.weights_[order] / gmm.weights_.sum(),
                         fit_history=tuple(history))


def classify_many(model: TriModalModel, points) -> np.ndarray:
    """Nearest decision center; exact ties go to the lowest index."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    d2 = ((points[:, None, :] - model.decision_centers[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def classify(model: TriModalModel, point) -> int:
    return int(classify_many(model, point)[0])


def assignment_matrix(model: TriModalModel, shots_per_state: int, seed) -> AssignmentMatrix:
    """Sampled R: classify `shots_per_state` shots of each prepared level."""
    rng = np.random.default_rng(seed)
    rows = []
    for index in range(3):
        shots = rng.multivariate_normal(model.centers[index], model.mode_covariance(index), size=shots_per_state)
        counts = np.bincount(classify_many(model, shots), minlength=3)
        rows.append(counts / shots_per_state)
    return AssignmentMatrix(np.array(rows), (shots_per_state,) * 3)


def _bivariate_cdf(a: float, b: float, rho: float) -> float:
    """
    P(z1 <= a, z2 <= b) for standard normals with correlation rho, in
    closed form through Owen's T function (deterministic, full precision).
    """
    if rho > 1 - 1e-12:
        return float(norm.cdf(min(a, b)))
    if rho < -1 + 1e-12:
        return float(max(0.0, norm.cdf(a) - norm.cdf(-b)))
    if a == 0 and b == 0:
        return float(0.25 + np.arcsin(rho) / (2 * np.pi))
    s = np.sqrt(1 - rho ** 2)

    def t(h, k):
        if h == 0:
            return 0.25 * np.sign(k)
        return owens_t(h, (k - rho * h) / (h * s))

    beta = 0.5 if (a * b < 0 or (a * b == 0 and a + b < 0)) else 0.0
    value = 0.5 * norm.cdf(a) + 0.5 * norm.cdf(b) - t(a, b) - t(b, a) - beta
    return float(np.clip(value, 0.0, 1.0))


def _cell_probability(mean: np.ndarray, cov: np.ndarray, decision: np.ndarray, j: int) -> float:
    """P(x in the nearest-center cell of decision[j]) for x ~ N(mean, cov)."""
    others = [k for k in range(3) if k != j]
    directions = np.array([decision[k] - decision[j] for k in others])
    bounds = np.array([(decision[k] @ decision[k] - decision[j] @ decision[j]) / 2 for k in others])
    shift = bounds - directions @ mean
    var = directions @ cov @ directions.T
    scales = np.sqrt(np.diag(var))
    if np.any(scales == 0):
        return float(np.all(shift >= 0))
    rho = var[0, 1] / (scales[0] * scales[1])
    return _bivariate_cdf(shift[0] / scales[0], shift[1] / scales[1], rho)


def expected_assignment_matrix(model: TriModalModel) -> AssignmentMatrix:
    """Exact nearest-center assignment probabilities (infinite shots)."""
    entries = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            if i != j:
                entries[i, j] = _cell_probability(model.centers[i], model.mode_covariance(i),
                                                  model.decision_centers, j)
        entries[i] = np.clip(entries[i], 0, 1)
        entries[i, i] = max(0.0, 1 - entries[i].sum())
        entries[i] /= entries[i].sum()
    return AssignmentMatrix(entries)


def joint_matrix(r_a: AssignmentMatrix, r_b: AssignmentMatrix) -> AssignmentMatrix:
    if r_a.dim != 3 or r_b.dim != 3:
        raise DimensionError(f"Joint matrix needs two 3x3 matrices, got {r_a.dim} and {r_b.dim}")
    return AssignmentMatrix(np.kron(r_a.entries, r_b.entries))


def apply_assignment(populations, r: AssignmentMatrix) -> np.ndarray:
    """Assigned-outcome distribution f = R^T p."""
    return r.entries.T @ np.asarray(populations, dtype=float)


def mitigate(assigned_freqs, r: AssignmentMatrix, condition_limit: float = CONDITION_LIMIT) -> MitigatedPopulations:
    """Solve f = R^T p for p. Negative entries are kept, only flagged."""
    f = np.asarray(assigned_freqs, dtype=float)
    if f.shape != (r.dim,):
        raise DimensionError(f"Frequency vector of length {f.size} does not match {r.dim}x{r.dim} matrix")
    if abs(f.sum() - 1) > 1e-9:
        raise ValueError(f"Assigned frequencies sum to {f.sum():.12g}, expected 1")
    cond = r.condition_number
    if not np.isfinite(cond) or cond > condition_limit:
        raise MitigationError(f"Assignment matrix condition number {cond:.3g} exceeds {condition_limit:.1g}",
                              condition_number=cond)
    p = np.linalg.solve(r.entries.T, f)
    negative = bool(np.any(p < 0))
    if negative:
        logger.warning("Mitigated populations contain negative entries (min %.3g)", p.min())
    return MitigatedPopulations(p, cond, negative)


# ---------------------------------------------------------------------------
# Geometry helpers
# ---------------------------------------------------------------------------

def pairwise_distance(error: float, sigma: float) -> float:
    """Center distance whose two-mode misassignment Phi(-d / 2 sigma) equals `error`."""
    if not 0 < error < 0.5:
        raise DomainError(f"Pairwise error must be in (0, 0.5), got {error}")
    return float(2 * sigma * norm.isf(error))


def equilateral_error(half_distance_in_sigma: float) -> float:
    """Per-state error for equilateral centers: 2 Phi(-h) - Phi2(-h, -h; 1/2)."""
    h = half_distance_in_sigma
    return float(2 * norm.cdf(-h) - _bivariate_cdf(-h, -h, 0.5))


def equilateral_model(average_error: float, sigma: float = 1.0) -> TriModalModel:
    """Equilateral, isotropic model whose nearest-center average error is `average_error`."""
    if not 0 < average_error < 2 / 3:
        raise DomainError(f"Average error must be in (0, 2/3), got {average_error}")
    h = brentq(lambda x: equilateral_error(x) - average_error, 0.0, 40.0, xtol=1e-14)
    radius = 2 * h * sigma / np.sqrt(3)
    angles = np.deg2rad([90.0, 210.0, 330.0])
    centers = radius * np.column_stack([np.cos(angles), np.sin(angles)])
    return TriModalModel.isotropic(centers, sigma)


def rotate_centers(model: TriModalModel, angle: float) -> TriModalModel:
    """Rotate the generating centers about their centroid, classifier unchanged."""
    centroid = model.centers.mean(axis=0)
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    moved = (model.centers - centroid) @ rot.T + centroid
    return replace(model, centers=moved, decision_centers=model.decision_centers)


def drifted(model: TriModalModel, target_error: float) -> TriModalModel:
    """Phase drift of the readout chain tuned so the average error reaches `target_error`."""
    base = expected_assignment_matrix(model).average_error
    if target_error <= base:
        raise DomainError(f"Drift target {target_error:.4g} must exceed the calibrated error {base:.4g}")
    limit = expected_assignment_matrix(rotate_centers(model, np.pi / 3)).average_error
    if target_error >= limit:
        raise DomainError(f"Drift target {target_error:.4g} unreachable (max {limit:.4g})")
    angle = brentq(lambda a: expected_assignment_matrix(rotate_centers(model, a)).average_error - target_error,
                   0.0, np.pi / 3, xtol=1e-12)
    logger.debug("Readout drift of %.3f deg reaches %.2f %% average error", np.rad2deg(angle), 100 * target_error)
    return rotate_centers(model, angle)


def write_shots_csv(path, points, prepared, assigned) -> Path:
    """Columns: u, v, prepared, assigned (level labels)."""
    path = Path(path)
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['u', 'v', 'prepared', 'assigned'])
        for (u, v), p, a in zip(points, prepared, assigned):
            writer.writerow([f"{u:.17g}", f"{v:.17g}", QUTRIT_LEVELS[int(p)], QUTRIT_LEVELS[int(a)]])
    return path
