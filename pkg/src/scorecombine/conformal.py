"""Conformal p-values and thresholds with a high-probability false-alarm bound.

Given ``v`` validation statistics drawn under the inlier hypothesis, the
conformal p-value of a test statistic ``t`` is ``(1 + #{t_i <= t}) / (1 + v)``.
Rejecting when it is ``<= a`` has a false-alarm rate which, as a function of
the random validation set, is distributed as
``Beta(floor((v+1)a), v + 1 - floor((v+1)a))``. :func:`find_threshold` picks
the largest ``a`` whose Beta law puts at most ``delta`` mass above ``alpha``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from scorecombine.errors import DataError, DomainError
from scorecombine.numerics import beta_quantile

__all__ = [
    "BetaLaw",
    "ConformalCalibration",
    "DegenerateCalibrationWarning",
    "GuaranteeConfig",
    "Threshold",
    "ValidationBank",
    "beta_far_law",
    "calibrate",
    "conformal_p",
    "detect",
    "find_threshold",
    "fixed_threshold_detect",
]

CALIBRATION_FORMAT = "scorecombine.calibration"
CALIBRATION_VERSION = 1


class DegenerateCalibrationWarning(UserWarning):
    """The validation set is too small for (alpha, delta); the detector never rejects."""


@dataclass(frozen=True, eq=False)
class ValidationBank:
    """Sorted statistics of the validation samples."""

    statistics: np.ndarray = field(repr=False)

    def __post_init__(self):
        stats = np.sort(np.asarray(self.statistics, dtype=float).ravel(), kind="stable")
        if stats.size < 1:
            raise DataError("validation bank is empty")
        if not np.all(np.isfinite(stats)):
            raise DataError("validation statistics must be finite")
        stats.setflags(write=False)
        object.__setattr__(self, "statistics", stats)

    @property
    def v(self) -> int:
        return int(self.statistics.size)


@dataclass(frozen=True)
class GuaranteeConfig:
    """Target false-alarm rate ``alpha`` and allowed failure probability ``delta``."""

    alpha: float
    delta: float

    def __post_init__(self):
        for name in ("alpha", "delta"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise DomainError(f"{name} must lie in (0, 1), got {value}")


class BetaLaw(NamedTuple):
    alpha_shape: int
    beta_shape: int
    degenerate: bool


class Threshold(NamedTuple):
    a: float
    l: int  # noqa: E741
    alpha_min: float
    degenerate: bool


def conformal_p(bank: ValidationBank, t):
    """Conformal p-value(s) of ``t``; always in ``[1/(1+v), 1]``."""
    arr = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DomainError("test statistic must be finite")
    counts = np.searchsorted(bank.statistics, arr, side="right")
    out = (1.0 + counts) / (1.0 + bank.v)
    return float(out) if np.ndim(t) == 0 else out


def beta_far_law(v: int, a: float) -> BetaLaw:
    """Beta parameters of the realized false-alarm rate at conformal threshold ``a``."""
    if v < 1:
        raise DomainError(f"v must be >= 1, got {v}")
    if not 0.0 < a < 1.0:
        raise DomainError(f"a must lie in (0, 1), got {a}")
    l = math.floor((v + 1) * a)  # noqa: E741
    return BetaLaw(l, v + 1 - l, l == 0)


def _tail_quantile(l: int, v: int, delta: float) -> float:  # noqa: E741
    # l = 0 never rejects: the false-alarm rate is exactly 0.
    if l == 0:
        return 0.0
    return beta_quantile(1.0 - delta, l, v + 1 - l)


def find_threshold(v: int, g: GuaranteeConfig) -> Threshold:
    """Bisection over ``a`` for the largest Beta interval index meeting the guarantee.

    Intervals ``[l/(v+1), (l+1)/(v+1))`` share one Beta law, so the search
    stops once ``a_min`` and ``a_max`` fall in adjacent intervals. The
    returned ``a = (l + 0.99)/(v + 1)`` sits just inside the right end of the
    interval of ``a_min``.
    """
    if v < 1:
        raise DomainError(f"v must be >= 1, got {v}")
    a_min, a_max = 0.0, 1.0
    while math.floor((v + 1) * a_max) - math.floor((v + 1) * a_min) > 1:
        a = 0.5 * (a_min + a_max)
        l = math.floor((v + 1) * a)  # noqa: E741
        if _tail_quantile(l, v, g.delta) > g.alpha:
            a_max = a
        else:
            a_min = a
    l = math.floor((v + 1) * a_min)  # noqa: E741
    a = (l + 0.99) / (v + 1)
    if l == 0:
        warnings.warn(
            f"v={v} validation samples cannot guarantee FAR <= {g.alpha} with probability "
            f">= {1 - g.delta}; the calibrated detector never rejects",
            DegenerateCalibrationWarning,
            stacklevel=2,
        )
        return Threshold(a, 0, 0.0, True)
    return Threshold(a, l, _tail_quantile(l, v, g.delta), False)


@dataclass(frozen=True, eq=False)
class ConformalCalibration:
    bank: ValidationBank
    a: float
    l: int  # noqa: E741
    alpha_min: float
    guarantee: GuaranteeConfig
    degenerate: bool = False

    def p_values(self, t):
        return conformal_p(self.bank, t)

    def detect(self, t):
        return detect(t, self)

    def to_dict(self) -> dict:
        return {
            "format": CALIBRATION_FORMAT,
            "version": CALIBRATION_VERSION,
            "v": self.bank.v,
            "alpha": self.guarantee.alpha,
            "delta": self.guarantee.delta,
            "a": self.a,
            "l": self.l,
            "alpha_min": self.alpha_min,
            "degenerate": self.degenerate,
            "validation_statistics": self.bank.statistics.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> ConformalCalibration:
        if d.get("format") != CALIBRATION_FORMAT:
            raise DataError(f"not a calibration file (format={d.get('format')!r})")
        if d.get("version") != CALIBRATION_VERSION:
            raise DataError(f"unsupported calibration version {d.get('version')!r}")
        try:
            bank = ValidationBank(np.asarray(d["validation_statistics"], dtype=float))
            if bank.v != int(d["v"]):
                raise DataError("validation bank size does not match 'v'")
            guarantee = GuaranteeConfig(float(d["alpha"]), float(d["delta"]))
            cal = cls(bank, float(d["a"]), int(d["l"]), float(d["alpha_min"]), guarantee,
                      bool(d["degenerate"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"corrupt calibration: {exc}") from exc
        if not (cal.l / (cal.bank.v + 1) <= cal.a < (cal.l + 1) / (cal.bank.v + 1)):
            raise DataError("corrupt calibration: threshold a is outside interval l")
        return cal


def calibrate(validation_statistics, g: GuaranteeConfig) -> ConformalCalibration:
    """Build a detector from validation statistics (inliers, independent of training)."""
    bank = ValidationBank(validation_statistics)
    thr = find_threshold(bank.v, g)
    return ConformalCalibration(bank, thr.a, thr.l, thr.alpha_min, g, thr.degenerate)


def detect(t, cal: ConformalCalibration):
    """``True`` (OOD) where the conformal p-value is ``<= a``."""
    out = conformal_p(cal.bank, t) <= cal.a
    return bool(out) if np.ndim(t) == 0 else out


def fixed_threshold_detect(t, tau: float):
    """``True`` (OOD) where ``t <= tau``; ``tau = -inf`` never rejects."""
    out = np.asarray(t, dtype=float) <= tau
    return bool(out) if np.ndim(t) == 0 else out
