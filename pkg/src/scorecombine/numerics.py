"""Special functions and seeded sampling used throughout the package.

The standard-normal cdf is backed by ``scipy.special.ndtr`` (Cephes). The
quantile, the regularized incomplete beta function and its inverse are
implemented here because the conformal threshold search queries them in
the far tails, where we want explicit control over convergence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from scorecombine.errors import DegenerateDistributionError, DomainError

__all__ = [
    "RngStream",
    "as_generator",
    "beta_quantile",
    "incomplete_beta",
    "sample_gaussian_vector",
    "std_normal_cdf",
    "std_normal_pdf",
    "std_normal_quantile",
]

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Acklam's rational approximation to the normal quantile (|rel err| < 1.2e-9).
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549671010848195e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _scalar_or_array(x: np.ndarray, like):
    if np.ndim(like) == 0:
        return float(x)
    return x


def std_normal_cdf(x):
    """Standard-normal cdf, elementwise. Raises ``DomainError`` on NaN/inf."""
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DomainError("std_normal_cdf requires finite input")
    return _scalar_or_array(special.ndtr(arr), x)


def std_normal_pdf(x):
    arr = np.asarray(x, dtype=float)
    return _scalar_or_array(_INV_SQRT_2PI * np.exp(-0.5 * arr * arr), x)


def _acklam_lower(p: np.ndarray) -> np.ndarray:
    """Initial quantile estimate for 0 < p <= 0.5."""
    out = np.empty_like(p)
    tail = p < _P_LOW
    if np.any(tail):
        q = np.sqrt(-2.0 * np.log(p[tail]))
        num = ((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]
        den = (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
        out[tail] = num / den
    mid = ~tail
    if np.any(mid):
        q = p[mid] - 0.5
        r = q * q
        num = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
        den = ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
        out[mid] = num / den
    return out


def std_normal_quantile(p):
    """Inverse standard-normal cdf, elementwise, for 0 < p < 1.

    Acklam's approximation refined by two Newton steps against
    :func:`std_normal_cdf`. The lower half is computed directly and the upper
    half by reflection, so ``std_normal_quantile(1 - p) == -std_normal_quantile(p)``
    whenever ``1 - p`` is exact.
    """
    arr = np.asarray(p, dtype=float)
    if not np.all((arr > 0.0) & (arr < 1.0)):
        raise DomainError("std_normal_quantile requires 0 < p < 1; clamp first")
    upper = arr > 0.5
    lower_p = np.where(upper, 1.0 - arr, arr)
    x = _acklam_lower(np.atleast_1d(lower_p).astype(float))
    lower_p = np.atleast_1d(lower_p)
    for _ in range(2):
        dens = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        err = special.ndtr(x) - lower_p
        step = np.divide(err, dens, out=np.zeros_like(x), where=dens > 0)
        x = x - step
    x = np.where(np.atleast_1d(upper), -x, x)
    if np.ndim(p) == 0:
        return float(x[0])
    return x.reshape(arr.shape)


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 20001):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def _log_beta(a: float, b: float) -> float:
    # betaln avoids the cancellation of lgamma(a) + lgamma(b) - lgamma(a + b) for large shapes.
    return float(special.betaln(a, b))


def _incomplete_beta_scalar(x: float, a: float, b: float) -> float:
    if math.isnan(x):
        raise DomainError("incomplete beta argument is NaN")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = a * math.log(x) + b * math.log1p(-x) - _log_beta(a, b)
    if x < a / (a + b):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def _check_shapes(a: float, b: float) -> None:
    if not (math.isfinite(a) and math.isfinite(b)):
        raise DomainError("beta shape parameters must be finite")
    if a == 0.0 or b == 0.0:
        raise DegenerateDistributionError(
            f"Beta({a}, {b}) is a point mass; the quantile is not defined here"
        )
    if a < 0.0 or b < 0.0:
        raise DomainError(f"beta shape parameters must be positive, got ({a}, {b})")


def incomplete_beta(x, a: float, b: float):
    """Regularized incomplete beta function I_x(a, b), i.e. the Beta(a, b) cdf.

    Evaluated with a continued fraction, switching to the symmetric form
    ``1 - I_{1-x}(b, a)`` when ``x >= a / (a + b)``. Accepts scalar or array ``x``;
    values outside ``[0, 1]`` map to 0 or 1 as a cdf should.
    """
    a = float(a)
    b = float(b)
    _check_shapes(a, b)
    if np.ndim(x) == 0:
        return _incomplete_beta_scalar(float(x), a, b)
    arr = np.asarray(x, dtype=float)
    out = np.fromiter(
        (_incomplete_beta_scalar(v, a, b) for v in arr.ravel()), dtype=float, count=arr.size
    )
    return out.reshape(arr.shape)


def beta_quantile(p: float, alpha_shape: float, beta_shape: float) -> float:
    """Inverse of :func:`incomplete_beta` in ``x`` for fixed shapes.

    Newton iterations kept inside a shrinking bracket; any Newton step that
    leaves the bracket, or fails to halve the residual, is replaced by a
    bisection step.

    Raises:
        DomainError: ``p`` not in (0, 1) or negative shapes.
        DegenerateDistributionError: a zero shape parameter.
    """
    p = float(p)
    a = float(alpha_shape)
    b = float(beta_shape)
    if not 0.0 < p < 1.0:
        raise DomainError(f"beta_quantile requires 0 < p < 1, got {p}")
    _check_shapes(a, b)

    log_b = _log_beta(a, b)
    lo, hi = 0.0, 1.0
    # Start from a Wilson-Hilferty style normal approximation, clipped into (0, 1).
    mean = a / (a + b)
    sd = math.sqrt(a * b / ((a + b) ** 2 * (a + b + 1.0)))
    x = min(max(mean + sd * std_normal_quantile(p), 1e-12), 1.0 - 1e-12)
    prev_err = math.inf
    for _ in range(400):
        err = _incomplete_beta_scalar(x, a, b) - p
        if err == 0.0:
            return x
        if err < 0.0:
            lo = x
        else:
            hi = x
        if hi - lo <= 4.0 * math.ulp(x) or abs(err) <= 1e-15 * min(p, 1.0 - p):
            return x
        log_pdf = (a - 1.0) * math.log(x) + (b - 1.0) * math.log1p(-x) - log_b
        pdf = math.exp(log_pdf) if log_pdf < 700.0 else math.inf
        candidate = x - err / pdf if pdf > 0.0 else math.nan
        if not (lo < candidate < hi) or abs(err) > 0.5 * prev_err:
            candidate = 0.5 * (lo + hi)
        prev_err = abs(err)
        x = candidate
    return x


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by ``(seed, stream_id)``.

    Backed by the counter-based Philox generator, so a stream's samples do
    not depend on which worker consumes it or in what order streams are used.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            value = getattr(self, name)
            if not 0 <= int(value) < 2**64:
                raise DomainError(f"{name} must be a 64-bit unsigned integer, got {value}")

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream_id),))
        return np.random.Generator(np.random.Philox(seq))

    def substream(self, index: int) -> RngStream:
        """Derive an independent child stream, e.g. one per Monte Carlo trial."""
        seq = np.random.SeedSequence([int(self.stream_id), int(index)])
        child_id = int(seq.generate_state(1, dtype=np.uint64)[0])
        return RngStream(self.seed, child_id)


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng).__name__}")


def sample_gaussian_vector(mean, cov_chol, rng, size: int | None = None) -> np.ndarray:
    """Draw ``mean + cov_chol @ w`` with ``w`` i.i.d. standard normal.

    With ``size`` set, returns a ``(size, m)`` array of independent draws.
    Passing an :class:`RngStream` always yields the same draw(s); pass a
    ``numpy.random.Generator`` to continue an existing sequence.
    """
    mean = np.asarray(mean, dtype=float)
    chol = np.asarray(cov_chol, dtype=float)
    if mean.ndim != 1:
        raise DomainError("mean must be a vector")
    m = mean.shape[0]
    if chol.ndim == 0:
        chol = chol * np.eye(m)
    if chol.shape != (m, m):
        raise DomainError(f"cov_chol must be {m}x{m}, got shape {chol.shape}")
    if np.any(np.triu(chol, 1) != 0.0):
        raise DomainError("cov_chol must be lower triangular")
    gen = as_generator(rng)
    if size is None:
        w = gen.standard_normal(m)
        return mean + chol @ w
    w = gen.standard_normal((size, m))
    return mean + w @ chol.T
