"""Detection metrics and the eigen-score / calibrated-curve analyses.

Statistics are inlier-oriented: a threshold ``tau`` flags a sample as OOD
when its statistic is ``<= tau``. The false-alarm rate at ``tau`` is the
fraction of inliers flagged and the detection rate the fraction of OOD
samples flagged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy import linalg, stats

from scorecombine.combiners import CovGlrtConfig, project_mu, sample_covariance
from scorecombine.errors import DataError, DomainError, NumericError
from scorecombine.numerics import std_normal_quantile

__all__ = [
    "EigenScoreTable",
    "LabeledStatistics",
    "ThresholdPoint",
    "auroc",
    "calibrated_curve",
    "dr_at_far",
    "eigen_analysis",
    "eigen_scores",
    "roc_curve",
    "threshold_at_far",
]


@dataclass(frozen=True, eq=False)
class LabeledStatistics:
    inlier: np.ndarray = field(repr=False)
    ood: np.ndarray = field(repr=False)

    def __post_init__(self):
        for name in ("inlier", "ood"):
            arr = np.asarray(getattr(self, name), dtype=float).ravel()
            if arr.size == 0:
                raise DataError(f"no {name} statistics")
            if not np.all(np.isfinite(arr)):
                raise DataError(f"{name} statistics must be finite")
            object.__setattr__(self, name, arr)


class ThresholdPoint(NamedTuple):
    tau: float
    far: float
    dr: float
    degenerate: bool


def auroc(d: LabeledStatistics) -> float:
    """Probability that a random inlier outscores a random OOD sample (ties count 1/2)."""
    n_in, n_ood = d.inlier.size, d.ood.size
    ranks = stats.rankdata(np.concatenate([d.inlier, d.ood]), method="average")
    u = ranks[:n_in].sum() - n_in * (n_in + 1) / 2.0
    return float(u / (n_in * n_ood))


def roc_curve(d: LabeledStatistics) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(thresholds, far, dr)`` over ``-inf`` and every distinct statistic, ascending."""
    thresholds = np.concatenate([[-np.inf], np.unique(np.concatenate([d.inlier, d.ood]))])
    far = np.searchsorted(np.sort(d.inlier), thresholds, side="right") / d.inlier.size
    dr = np.searchsorted(np.sort(d.ood), thresholds, side="right") / d.ood.size
    return thresholds, far, dr


def threshold_at_far(d: LabeledStatistics, alpha: float) -> ThresholdPoint:
    """Most permissive threshold whose inlier false-alarm rate is ``<= alpha``.

    ``degenerate`` is set when only ``tau = -inf`` qualifies (then DR = 0).
    """
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    thresholds, far, dr = roc_curve(d)
    ok = np.flatnonzero(far <= alpha)
    k = ok[-1]
    return ThresholdPoint(float(thresholds[k]), float(far[k]), float(dr[k]), bool(k == 0))


def dr_at_far(d: LabeledStatistics, alpha: float) -> float:
    return threshold_at_far(d, alpha).dr


def eigen_scores(z, eigvecs: np.ndarray, mu) -> np.ndarray:
    """``t_k = ((mu/2 - z) . v_k) * (v_k . mu)`` for each eigenvector column ``v_k``.

    ``z`` and ``mu`` may be single vectors or row-stacked matrices.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    left = (0.5 * mu - z) @ eigvecs
    right = mu @ eigvecs
    return left * right


@dataclass(frozen=True, eq=False)
class EigenScoreTable:
    """Eigen-decomposition of the inlier z covariance and per-direction scores.

    Eigenvalues are in nonincreasing order; ``eigenvectors[:, k]`` pairs with
    ``eigenvalues[k]``, ``inlier_scores[:, k]`` / ``ood_scores[:, k]``, and
    ``aurocs[k]``.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    inlier_scores: np.ndarray
    ood_scores: np.ndarray
    aurocs: np.ndarray
    metric: str

    def spearman(self) -> float:
        """Rank correlation between eigenvalue and eigen-score AUROC."""
        if self.eigenvalues.size < 2:
            return float("nan")
        return float(stats.spearmanr(self.eigenvalues, self.aurocs).statistic)

    def rows(self) -> list[dict]:
        return [
            {"k": k + 1, "eigenvalue": float(lam), "auroc": float(a)}
            for k, (lam, a) in enumerate(zip(self.eigenvalues, self.aurocs))
        ]


def _projections(z: np.ndarray, epsilon: float, cfg: CovGlrtConfig | None) -> np.ndarray:
    if cfg is None:
        return np.minimum(z, -epsilon)
    return np.array([project_mu(row, cfg) for row in z]).reshape(z.shape)


def eigen_analysis(
    z_train,
    z_inlier,
    z_ood,
    epsilon: float = 0.25,
    sigma_ridge: float = 1e-6,
    metric: str = "identity",
) -> EigenScoreTable:
    """Eigen-scores of the GLRT along the eigenvectors of the inlier z covariance.

    ``metric`` selects the projection ``mu*``: ``"identity"`` uses
    ``min(z, -eps)``, for which the eigen-scores sum exactly to the GLRT
    statistic; ``"sample"`` uses the minimizer in the metric of the sample
    covariance itself.
    """
    z_train = np.asarray(z_train, dtype=float)
    if z_train.ndim != 2:
        raise DomainError("z_train must be 2-D")
    n, m = z_train.shape
    if not n >= m >= 1:
        raise DataError(f"eigen analysis needs n >= m >= 1, got n={n}, m={m}")
    if metric not in ("identity", "sample"):
        raise DomainError(f"metric must be 'identity' or 'sample', got {metric!r}")
    cov = sample_covariance(z_train, sigma_ridge)
    try:
        eigvals, eigvecs = linalg.eigh(cov)
    except linalg.LinAlgError as exc:
        raise NumericError(f"eigen-decomposition failed: {exc}") from exc
    order = np.argsort(eigvals, kind="stable")[::-1]
    eigvals, eigvecs = eigvals[order], eigvecs[:, order]
    cfg = CovGlrtConfig(epsilon, cov) if metric == "sample" else None

    z_in = np.atleast_2d(np.asarray(z_inlier, dtype=float))
    z_out = np.atleast_2d(np.asarray(z_ood, dtype=float))
    s_in = eigen_scores(z_in, eigvecs, _projections(z_in, epsilon, cfg))
    s_out = eigen_scores(z_out, eigvecs, _projections(z_out, epsilon, cfg))
    aurocs = np.array([auroc(LabeledStatistics(s_in[:, k], s_out[:, k])) for k in range(m)])
    return EigenScoreTable(eigvals, eigvecs, s_in, s_out, aurocs, metric)


def calibrated_curve(
    statistic: Callable[[np.ndarray], np.ndarray],
    far_target: float,
    grid,
    step: float = 1e-5,
) -> np.ndarray:
    """Shift and scale a scalar statistic so that it crosses 0 at the ``far_target``
    quantile of N(0, 1) with unit slope there.

    Returns a ``(len(grid), 2)`` array of ``(z, C * (t(z) - tau))``. The
    statistic must be nondecreasing on the grid.
    """
    grid = np.asarray(grid, dtype=float)
    values = np.asarray(statistic(grid), dtype=float)
    if np.any(np.diff(values) < 0.0) or np.any(np.diff(grid) <= 0.0):
        raise DomainError("statistic must be nondecreasing on an increasing grid")
    z0 = std_normal_quantile(far_target)
    tau = float(np.asarray(statistic(np.array([z0])))[0])
    ends = np.asarray(statistic(np.array([z0 - step, z0 + step])), dtype=float)
    slope = (ends[1] - ends[0]) / (2.0 * step)
    if not slope > 0.0:
        raise DomainError("statistic is flat at the calibration point; cannot rescale")
    return np.column_stack([grid, (values - tau) / slope])
