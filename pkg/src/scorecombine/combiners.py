"""Rules that reduce one sample's vector of scores to a single inlier statistic.

Every statistic here is oriented "higher = more inlier": a sample is declared
out-of-distribution when its statistic is *at or below* a threshold. The
z-value rules (GLRT, Stouffer, covariance GLRT) take empirical z-values; the
p-value rules (Fisher, Bonferroni, Simes/BH, ALR) take left-tail inlier
p-values, where small means extreme.

All rule functions accept a single vector (returning a float) or a 2-D array
with one sample per row (returning a 1-D array).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg, special

from scorecombine.boxqp import kkt_residual, solve_upper_bounded_qp
from scorecombine.errors import DataError, DomainError, SchemaError
from scorecombine.ztransform import ScoreMatrix, ZTransform

__all__ = [
    "RULES",
    "Combiner",
    "CovGlrtConfig",
    "CsiWeights",
    "alr_statistic",
    "bonferroni_statistic",
    "cov_glrt_statistic",
    "csi_heuristic_statistic",
    "fisher_statistic",
    "fit_csi_weights",
    "glrt_statistic",
    "project_mu",
    "project_mu_residual",
    "sample_covariance",
    "simes_statistic",
    "stouffer_statistic",
]

DEFAULT_EPSILON = 0.25
DEFAULT_SIGMA_RIDGE = 1e-6

Z_RULES = ("glrt", "stouffer", "glrt-cov")
P_RULES = ("fisher", "bonferroni", "simes", "alr")
RULES = ("glrt", "fisher", "bonferroni", "simes", "stouffer", "alr", "csi", "glrt-cov")


def _as_rows(x, what: str) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.ndim != 2:
        raise DomainError(f"{what} must be a vector or a 2-D array of row vectors")
    if arr.shape[1] == 0:
        raise DomainError(f"{what} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{what} must be finite")
    return arr, single


def _out(values: np.ndarray, single: bool):
    return float(values[0]) if single else values


def _check_p(q: np.ndarray, *, allow_one: bool = True) -> None:
    if np.any(q <= 0.0) or np.any(q > 1.0) or (not allow_one and np.any(q >= 1.0)):
        raise DomainError("p-values must lie in (0, 1]; clamp upstream")


def glrt_statistic(z, epsilon: float = DEFAULT_EPSILON):
    """Log-GLR for the negative-means problem with identity covariance.

    With ``z_minus = min(z, -epsilon)`` (the constrained ML estimate of the
    alternative mean), returns ``sum((z_minus / 2 - z) * z_minus)``, which
    equals ``-|z|^2 / 2 + |z - z_minus|^2 / 2``.
    """
    if not (epsilon >= 0.0 and math.isfinite(epsilon)):
        raise DomainError(f"epsilon must be finite and >= 0, got {epsilon}")
    zz, single = _as_rows(z, "z")
    z_minus = np.minimum(zz, -epsilon)
    return _out(np.sum((0.5 * z_minus - zz) * z_minus, axis=1), single)


def stouffer_statistic(z):
    zz, single = _as_rows(z, "z")
    return _out(zz.sum(axis=1) / math.sqrt(zz.shape[1]), single)


def fisher_statistic(q):
    """Sum of log p-values. ``q = 0`` is a domain error."""
    qq, single = _as_rows(q, "q")
    _check_p(qq)
    return _out(np.log(qq).sum(axis=1), single)


def bonferroni_statistic(q):
    qq, single = _as_rows(q, "q")
    _check_p(qq)
    return _out(qq.min(axis=1), single)


def simes_statistic(q):
    """Simes / Benjamini-Hochberg statistic ``min_l q_(l) / l``."""
    qq, single = _as_rows(q, "q")
    _check_p(qq)
    ordered = np.sort(qq, axis=1, kind="stable")
    ranks = np.arange(1, qq.shape[1] + 1)
    return _out((ordered / ranks).min(axis=1), single)


def _bernoulli_kl(t: np.ndarray, x: np.ndarray) -> np.ndarray:
    # K(t, x) = t log(t/x) + (1-t) log((1-t)/(1-x)); rel_entr handles t in {0, 1}.
    return special.rel_entr(t, x) + special.rel_entr(1.0 - t, 1.0 - x)


def alr_statistic(q):
    """Negative log of Walther's average likelihood ratio (ALR).

    For sorted p-values ``q_(1) <= ... <= q_(m)`` and ``k = max(1, floor(m/2))``::

        ALR = sum_{i=1..k} w_i * exp(m * K(i/m, q_(i)) * 1{q_(i) < i/m})
        K(t, x) = t log(t/x) + (1 - t) log((1 - t)/(1 - x))
        w_i = (1/i) / sum_{j=1..k} 1/j

    Walther (2013) weights by ``1/(i log(m/3))``; normalizing by the harmonic
    sum instead changes ALR by a constant factor for fixed ``m`` (so decisions
    are unchanged) and stays defined for ``m <= 3``. The result is returned as
    ``-log(ALR)`` so that, like the other rules, higher means more inlier. It
    is 0 when no sorted p-value falls below its uniform expectation.
    """
    qq, single = _as_rows(q, "q")
    _check_p(qq)
    m = qq.shape[1]
    k = max(1, m // 2)
    ordered = np.sort(qq, axis=1, kind="stable")[:, :k]
    i = np.arange(1, k + 1, dtype=float)
    t = i / m
    exponent = np.where(ordered < t, m * _bernoulli_kl(t, ordered), 0.0)
    log_w = -np.log(i) - math.log(np.sum(1.0 / i))
    log_alr = special.logsumexp(exponent + log_w, axis=1)
    return _out(-log_alr, single)


@dataclass(frozen=True)
class CsiWeights:
    """Per-shift weights of the CSI heuristic: ``groups[j] = (cos_j, norm_j, shift_j)``."""

    groups: tuple[tuple[str, str, str], ...]
    lambda_con: tuple[float, ...]
    lambda_shift: tuple[float, ...]

    def __post_init__(self):
        if not (len(self.groups) == len(self.lambda_con) == len(self.lambda_shift)):
            raise SchemaError("one (lambda_con, lambda_shift) pair per group is required")
        cols = [c for g in self.groups for c in g]
        if len(set(cols)) != len(cols):
            raise SchemaError("each CSI column may appear in exactly one group slot")
        for lam in (*self.lambda_con, *self.lambda_shift):
            if not (math.isfinite(lam) and lam > 0.0):
                raise DomainError(f"CSI weights must be positive and finite, got {lam}")

    @property
    def columns(self) -> list[str]:
        return [c for g in self.groups for c in g]

    def to_dict(self) -> dict:
        return {
            "groups": [list(g) for g in self.groups],
            "lambda_con": list(self.lambda_con),
            "lambda_shift": list(self.lambda_shift),
        }

    @classmethod
    def from_dict(cls, d: dict) -> CsiWeights:
        return cls(
            tuple(tuple(g) for g in d["groups"]),
            tuple(float(v) for v in d["lambda_con"]),
            tuple(float(v) for v in d["lambda_shift"]),
        )


def _group_column(scores: Mapping[str, np.ndarray], name: str) -> np.ndarray:
    if name not in scores:
        raise SchemaError(f"CSI grouping refers to missing column {name!r}")
    return np.asarray(scores[name], dtype=float)


def fit_csi_weights(train: ScoreMatrix, grouping: Sequence[Sequence[str]]) -> CsiWeights:
    """Weights are reciprocals of the training means of each norm and shift column."""
    groups = tuple(tuple(g) for g in grouping)
    if not groups or any(len(g) != 3 for g in groups):
        raise SchemaError("CSI grouping must be a non-empty list of (cos, norm, shift) triples")
    cols = train.as_mapping()
    lam_con, lam_shift = [], []
    for _cos, norm, shift in groups:
        for name, sink in ((norm, lam_con), (shift, lam_shift)):
            mean = float(np.mean(_group_column(cols, name)))
            if not mean > 0.0:
                raise DataError(f"training mean of {name!r} is {mean}; its reciprocal is not a usable weight")
            sink.append(1.0 / mean)
    return CsiWeights(groups, tuple(lam_con), tuple(lam_shift))


def csi_heuristic_statistic(raw_scores: Mapping[str, np.ndarray] | ScoreMatrix, w: CsiWeights):
    """``sum_j lambda_con_j * cos_j * norm_j + lambda_shift_j * shift_j`` on raw scores."""
    if isinstance(raw_scores, ScoreMatrix):
        raw_scores = raw_scores.as_mapping()
    total = 0.0
    for (cos, norm, shift), lc, ls in zip(w.groups, w.lambda_con, w.lambda_shift):
        total = total + lc * _group_column(raw_scores, cos) * _group_column(raw_scores, norm)
        total = total + ls * _group_column(raw_scores, shift)
    if np.ndim(total) == 0:
        return float(total)
    return np.asarray(total, dtype=float)


@dataclass(frozen=True, eq=False)
class CovGlrtConfig:
    """Margin ``epsilon`` and shared covariance ``sigma`` of the correlated model."""

    epsilon: float
    sigma: np.ndarray = field(repr=False)
    tol: float = 1e-8

    def __post_init__(self):
        if not (self.epsilon >= 0.0 and math.isfinite(self.epsilon)):
            raise DomainError(f"epsilon must be finite and >= 0, got {self.epsilon}")
        sigma = np.array(self.sigma, dtype=float)
        if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
            raise DomainError(f"sigma must be square, got shape {sigma.shape}")
        if not np.all(np.isfinite(sigma)):
            raise DomainError("sigma must be finite")
        if np.max(np.abs(sigma - sigma.T), initial=0.0) > 1e-10:
            raise DomainError("sigma must be symmetric")
        sigma = 0.5 * (sigma + sigma.T)
        try:
            chol = linalg.cho_factor(sigma, lower=True)
        except linalg.LinAlgError:
            raise DomainError("sigma must be positive definite") from None
        precision = linalg.cho_solve(chol, np.eye(sigma.shape[0]))
        precision = 0.5 * (precision + precision.T)
        sigma.setflags(write=False)
        precision.setflags(write=False)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "_precision", precision)

    @property
    def m(self) -> int:
        return self.sigma.shape[0]

    @property
    def precision(self) -> np.ndarray:
        return self._precision

    @property
    def is_identity(self) -> bool:
        return bool(np.array_equal(self.sigma, np.eye(self.m)))


def project_mu(z, cfg: CovGlrtConfig) -> np.ndarray:
    """``argmin_{mu <= -eps} (z - mu)' Sigma^{-1} (z - mu)`` by the active-set QP.

    For ``Sigma = I`` the solution is ``min(z, -eps)`` elementwise and that
    closed form is returned directly.
    """
    zz = np.asarray(z, dtype=float)
    if zz.shape != (cfg.m,):
        raise DomainError(f"z must have length {cfg.m}, got shape {zz.shape}")
    if not np.all(np.isfinite(zz)):
        raise DomainError("z must be finite")
    upper = np.full(cfg.m, -cfg.epsilon)
    if cfg.is_identity:
        return np.minimum(zz, upper)
    P = cfg.precision
    return solve_upper_bounded_qp(P, -P @ zz, upper, x0=zz, tol=cfg.tol)


def project_mu_residual(z, mu, cfg: CovGlrtConfig) -> float:
    """KKT residual of a candidate ``mu`` for the projection problem."""
    P = cfg.precision
    return kkt_residual(P, -P @ np.asarray(z, dtype=float), np.full(cfg.m, -cfg.epsilon), mu)


def cov_glrt_statistic(z, cfg: CovGlrtConfig):
    """``(mu*/2 - z)' Sigma^{-1} mu*`` with ``mu*`` from :func:`project_mu`."""
    zz, single = _as_rows(z, "z")
    P = cfg.precision
    out = np.empty(zz.shape[0])
    for i, row in enumerate(zz):
        mu = project_mu(row, cfg)
        out[i] = (0.5 * mu - row) @ (P @ mu)
    return _out(out, single)


def sample_covariance(zmatrix, sigma_ridge: float = DEFAULT_SIGMA_RIDGE) -> np.ndarray:
    """Uncentred second-moment matrix ``Z'Z / (n - 1)`` plus ``sigma_ridge * I``."""
    zz = np.asarray(zmatrix, dtype=float)
    if zz.ndim != 2:
        raise DomainError("zmatrix must be 2-D")
    n, m = zz.shape
    if n < 2:
        raise DataError(f"sample covariance needs at least 2 rows, got {n}")
    if sigma_ridge < 0:
        raise DomainError("sigma_ridge must be >= 0")
    cov = zz.T @ zz / (n - 1)
    cov = 0.5 * (cov + cov.T)
    return cov + sigma_ridge * np.eye(m)


@dataclass(frozen=True, eq=False)
class Combiner:
    """A configured combining rule applied to whole score matrices.

    ``sigma`` is only used by ``glrt-cov`` and ``csi`` only by ``csi``.
    """

    rule: str
    epsilon: float = DEFAULT_EPSILON
    sigma: np.ndarray | None = field(default=None, repr=False)
    csi: CsiWeights | None = None

    def __post_init__(self):
        if self.rule not in RULES:
            raise SchemaError(f"unknown rule {self.rule!r}; valid rules: {', '.join(RULES)}")
        if not (self.epsilon >= 0.0 and math.isfinite(self.epsilon)):
            raise DomainError(f"epsilon must be finite and >= 0, got {self.epsilon}")
        if self.rule == "glrt-cov" and self.sigma is None:
            raise SchemaError("rule glrt-cov needs a covariance matrix")
        if self.rule == "csi" and self.csi is None:
            raise SchemaError("rule csi needs CSI weights (fit them with a column grouping)")

    def _cov_config(self) -> CovGlrtConfig:
        return CovGlrtConfig(self.epsilon, self.sigma)

    def from_z(self, z) -> np.ndarray:
        """Statistics from a z-matrix; p-value rules use ``q = Phi(z)``."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if z.shape[0] == 0:
            return np.empty(0)
        if self.rule == "glrt":
            return glrt_statistic(z, self.epsilon)
        if self.rule == "stouffer":
            return stouffer_statistic(z)
        if self.rule == "glrt-cov":
            return cov_glrt_statistic(z, self._cov_config())
        if self.rule in P_RULES:
            q = special.ndtr(z)
            if np.any(q <= 0.0):
                raise DataError("z-value too negative: Phi(z) underflows to 0")
            return self.from_p(q)
        raise SchemaError("rule csi combines raw scores, not z-values")

    def from_p(self, q) -> np.ndarray:
        q = np.atleast_2d(np.asarray(q, dtype=float))
        if q.shape[0] == 0:
            return np.empty(0)
        fn = {
            "fisher": fisher_statistic,
            "bonferroni": bonferroni_statistic,
            "simes": simes_statistic,
            "alr": alr_statistic,
        }.get(self.rule)
        if fn is None:
            raise SchemaError(f"rule {self.rule!r} does not combine p-values")
        return fn(q)

    def statistics(self, transform: ZTransform, scores: ScoreMatrix) -> np.ndarray:
        """One statistic per row of ``scores``, in row order."""
        if self.rule == "csi":
            if scores.n == 0:
                return np.empty(0)
            return np.asarray(csi_heuristic_statistic(scores, self.csi), dtype=float)
        if self.rule in P_RULES:
            return self.from_p(transform.p_matrix(scores))
        return self.from_z(transform.transform_matrix(scores))

    def to_dict(self) -> dict:
        d: dict = {"rule": self.rule, "epsilon": self.epsilon}
        if self.sigma is not None:
            d["sigma"] = np.asarray(self.sigma).tolist()
        if self.csi is not None:
            d["csi"] = self.csi.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> Combiner:
        sigma = d.get("sigma")
        csi = d.get("csi")
        return cls(
            rule=d["rule"],
            epsilon=float(d.get("epsilon", DEFAULT_EPSILON)),
            sigma=None if sigma is None else np.asarray(sigma, dtype=float),
            csi=None if csi is None else CsiWeights.from_dict(csi),
        )
