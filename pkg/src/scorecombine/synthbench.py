"""Synthetic negative-means benchmarks and Monte Carlo checks of the guarantees.

Z-values are drawn directly: ``N(0, R)`` under H0 and ``N(mu, R)`` under H1,
with ``R`` a correlation matrix (identity by default). Every random draw comes
from an :class:`~scorecombine.numerics.RngStream` keyed by the scenario seed and
a fixed stream index, so results do not depend on evaluation order or on the
number of worker threads.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy import linalg, special

from scorecombine.combiners import DEFAULT_EPSILON, Combiner
from scorecombine.conformal import (
    ConformalCalibration,
    GuaranteeConfig,
    ValidationBank,
    beta_far_law,
    conformal_p,
    detect,
    find_threshold,
)
from scorecombine.errors import DomainError, SchemaError
from scorecombine.evaluation import LabeledStatistics, auroc, dr_at_far
from scorecombine.numerics import RngStream, sample_gaussian_vector

__all__ = [
    "GuaranteeResult",
    "NmScenario",
    "ar1_correlation",
    "beta_law_trial",
    "combiner_label",
    "default_suite",
    "dense_scenario",
    "epsilon_sweep",
    "generate",
    "guarantee_trial",
    "power_sweep",
    "scenario_from_dict",
    "sparse_scenario",
]

_H0_STREAM = 0
_H1_STREAM = 1
_BOOT_STREAM = 2


def ar1_correlation(m: int, rho: float) -> np.ndarray:
    idx = np.arange(m)
    return rho ** np.abs(idx[:, None] - idx[None, :])


@dataclass(frozen=True, eq=False)
class NmScenario:
    """One synthetic H0/H1 pair of z-value distributions."""

    name: str
    mu: np.ndarray = field(repr=False)
    n_h0: int = 10_000
    n_h1: int = 10_000
    seed: int = 0
    epsilon: float = DEFAULT_EPSILON
    correlation: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float).ravel()
        if mu.size < 1 or not np.all(np.isfinite(mu)):
            raise DomainError("scenario mean must be a finite, non-empty vector")
        object.__setattr__(self, "mu", mu)
        if self.n_h0 < 1 or self.n_h1 < 1:
            raise DomainError("sample counts must be positive")
        if self.correlation is not None:
            corr = np.asarray(self.correlation, dtype=float)
            if corr.shape != (mu.size, mu.size):
                raise DomainError(f"correlation must be {mu.size}x{mu.size}, got {corr.shape}")
            if not np.allclose(corr, corr.T, atol=1e-10):
                raise DomainError("correlation matrix must be symmetric")
            try:
                chol = linalg.cholesky(corr, lower=True)
            except linalg.LinAlgError:
                raise DomainError("correlation matrix must be positive definite") from None
            object.__setattr__(self, "correlation", corr)
            object.__setattr__(self, "_chol", chol)
        else:
            object.__setattr__(self, "_chol", np.eye(mu.size))

    @property
    def m(self) -> int:
        return self.mu.size

    @property
    def cov_chol(self) -> np.ndarray:
        return self._chol

    @property
    def sigma(self) -> np.ndarray:
        return np.eye(self.m) if self.correlation is None else self.correlation

    @property
    def satisfies_nm_constraint(self) -> bool:
        """Whether every alternative mean is at most ``-epsilon``.

        Sparse scenarios deliberately violate this; they model the regime where
        only a few scores move.
        """
        return bool(np.all(self.mu <= -self.epsilon))


def dense_scenario(m: int = 12, shift: float = -0.5, **kw) -> NmScenario:
    kw.setdefault("name", f"dense_m{m}_shift{shift:g}")
    return NmScenario(mu=np.full(m, float(shift)), **kw)


def sparse_scenario(m: int = 12, k: int = 1, shift: float = -3.0, **kw) -> NmScenario:
    if not 0 < k <= m:
        raise DomainError(f"need 0 < k <= m, got k={k}, m={m}")
    mu = np.zeros(m)
    mu[:k] = shift
    kw.setdefault("name", f"sparse_m{m}_k{k}_shift{shift:g}")
    return NmScenario(mu=mu, **kw)


def default_suite(n: int = 10_000, seed: int = 0) -> list[NmScenario]:
    common = dict(n_h0=n, n_h1=n, seed=seed)
    return [
        dense_scenario(12, -0.5, name="dense", **common),
        sparse_scenario(12, 1, -3.0, name="sparse_k1", **common),
        sparse_scenario(12, 3, -3.0, name="sparse_k3", **common),
        dense_scenario(12, -0.5, name="correlated_ar1", correlation=ar1_correlation(12, 0.5),
                       **common),
        dense_scenario(24, -0.5, name="dense_m24", **common),
    ]


def scenario_from_dict(d: dict, defaults: dict | None = None) -> NmScenario:
    """Build a scenario from a config entry.

    Keys: ``name``, ``kind`` (``dense``/``sparse``/``mean``), ``m``, ``shift``,
    ``k`` (sparse), ``mu`` (kind ``mean``), ``n_h0``, ``n_h1``, ``seed``,
    ``epsilon``, and ``correlation`` which is either ``{"ar1": rho}`` or an
    explicit matrix.
    """
    d = {**(defaults or {}), **d}
    kind = d.get("kind", "dense")
    corr = d.get("correlation")
    if isinstance(corr, dict):
        if set(corr) != {"ar1"}:
            raise SchemaError(f"unsupported correlation spec {corr!r}")
        corr = ar1_correlation(int(d["m"]), float(corr["ar1"]))
    elif corr is not None:
        corr = np.asarray(corr, dtype=float)
    common = dict(
        n_h0=int(d.get("n_h0", d.get("n", 10_000))),
        n_h1=int(d.get("n_h1", d.get("n", 10_000))),
        seed=int(d.get("seed", 0)),
        epsilon=float(d.get("epsilon", DEFAULT_EPSILON)),
        correlation=corr,
    )
    if "name" in d:
        common["name"] = str(d["name"])
    try:
        if kind == "dense":
            return dense_scenario(int(d["m"]), float(d.get("shift", -0.5)), **common)
        if kind == "sparse":
            return sparse_scenario(int(d["m"]), int(d.get("k", 1)), float(d.get("shift", -3.0)),
                                   **common)
        if kind == "mean":
            common.setdefault("name", "custom")
            return NmScenario(mu=np.asarray(d["mu"], dtype=float), **common)
    except KeyError as exc:
        raise SchemaError(f"scenario {d.get('name', '?')!r} is missing key {exc}") from None
    raise SchemaError(f"unknown scenario kind {kind!r}")


def generate(scn: NmScenario) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``(h0, h1)`` z-matrices of shapes ``(n_h0, m)`` and ``(n_h1, m)``."""
    root = RngStream(scn.seed)
    h0 = sample_gaussian_vector(np.zeros(scn.m), scn.cov_chol, root.substream(_H0_STREAM),
                                size=scn.n_h0)
    h1 = sample_gaussian_vector(scn.mu, scn.cov_chol, root.substream(_H1_STREAM), size=scn.n_h1)
    return h0, h1


def combiner_label(c: Combiner) -> str:
    if c.rule in ("glrt", "glrt-cov"):
        return f"{c.rule}(eps={c.epsilon:g})"
    return c.rule


def _as_combiner(c, scn: NmScenario) -> Combiner:
    if isinstance(c, Combiner):
        if c.rule == "glrt-cov" and c.sigma is None:
            return Combiner("glrt-cov", c.epsilon, sigma=scn.sigma)
        return c
    if isinstance(c, str):
        c = {"rule": c}
    c = dict(c)
    if c.get("rule") == "glrt-cov" and "sigma" not in c:
        c["sigma"] = scn.sigma.tolist()
    return Combiner.from_dict(c)


def _bootstrap_se(stats_in: np.ndarray, stats_out: np.ndarray, boot_idx, alpha: float):
    if not boot_idx:
        return float("nan"), float("nan")
    aucs, drs = [], []
    for idx_in, idx_out in boot_idx:
        d = LabeledStatistics(stats_in[idx_in], stats_out[idx_out])
        aucs.append(auroc(d))
        drs.append(dr_at_far(d, alpha))
    return float(np.std(aucs, ddof=1)), float(np.std(drs, ddof=1))


def power_sweep(
    scenarios: Sequence[NmScenario],
    combiners: Sequence,
    alpha: float = 0.05,
    n_boot: int = 200,
) -> list[dict]:
    """AUROC and DR at FAR ``alpha`` for every (scenario, combiner) pair.

    All combiners of a scenario see the same samples and the same bootstrap
    resamples, so differences between rules are paired.
    """
    rows = []
    for scn in scenarios:
        if not combiners:
            continue
        h0, h1 = generate(scn)
        gen = RngStream(scn.seed).substream(_BOOT_STREAM).generator()
        boot_idx = [
            (gen.integers(0, scn.n_h0, scn.n_h0), gen.integers(0, scn.n_h1, scn.n_h1))
            for _ in range(n_boot)
        ]
        for c in combiners:
            comb = _as_combiner(c, scn)
            t0, t1 = comb.from_z(h0), comb.from_z(h1)
            d = LabeledStatistics(t0, t1)
            auc_se, dr_se = _bootstrap_se(t0, t1, boot_idx, alpha)
            rows.append({
                "scenario": scn.name,
                "combiner": combiner_label(comb),
                "m": scn.m,
                "n_h0": scn.n_h0,
                "n_h1": scn.n_h1,
                "auroc": auroc(d),
                "auroc_se": auc_se,
                "alpha": alpha,
                "dr_at_far": dr_at_far(d, alpha),
                "dr_se": dr_se,
            })
    return rows


def epsilon_sweep(
    scn: NmScenario,
    epsilons: Sequence[float] = (0.0, 0.25, 0.5, 1.0),
    alpha: float = 0.05,
) -> list[dict]:
    """GLRT AUROC and DR as a function of the margin ``epsilon`` on one scenario."""
    h0, h1 = generate(scn)
    rows = []
    for eps in epsilons:
        comb = Combiner("glrt", float(eps))
        d = LabeledStatistics(comb.from_z(h0), comb.from_z(h1))
        rows.append({"scenario": scn.name, "epsilon": float(eps), "auroc": auroc(d),
                     "dr_at_far": dr_at_far(d, alpha)})
    return rows


def _map_trials(fn: Callable[[int], float], trials: int, workers: int) -> np.ndarray:
    if workers <= 1:
        return np.array([fn(i) for i in range(trials)], dtype=float)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return np.array(list(pool.map(fn, range(trials))), dtype=float)


class GuaranteeResult(NamedTuple):
    violation_rate: float
    mean_far: float
    a: float
    l: int  # noqa: E741
    alpha_min: float
    degenerate: bool
    fars: np.ndarray


def guarantee_trial(
    v: int,
    g: GuaranteeConfig,
    trials: int,
    seed: int,
    n_fresh: int | None = None,
    workers: int = 1,
) -> GuaranteeResult:
    """Fraction of validation sets whose calibrated detector exceeds FAR ``alpha``.

    Each trial draws ``v`` H0 statistics (standard normal), calibrates, and
    measures the realized false-alarm rate. With ``n_fresh=None`` that rate is
    computed exactly: the detector flags ``t`` iff ``t`` lies below the
    ``l``-th smallest validation statistic, so the rate is ``Phi`` of that
    order statistic. Otherwise it is estimated from ``n_fresh`` fresh H0 draws.
    """
    if trials < 100:
        raise DomainError(f"need at least 100 trials, got {trials}")
    thr = find_threshold(v, g)
    root = RngStream(seed)

    def one(i: int) -> float:
        gen = root.substream(i).generator()
        bank = ValidationBank(gen.standard_normal(v))
        if thr.degenerate:
            return 0.0
        if n_fresh is None:
            return float(special.ndtr(bank.statistics[thr.l - 1]))
        cal = ConformalCalibration(bank, thr.a, thr.l, thr.alpha_min, g)
        return float(np.mean(detect(gen.standard_normal(n_fresh), cal)))

    fars = _map_trials(one, trials, workers)
    return GuaranteeResult(
        float(np.mean(fars > g.alpha)), float(np.mean(fars)), thr.a, thr.l, thr.alpha_min,
        thr.degenerate, fars,
    )


def beta_law_trial(
    v: int, a: float, trials: int, seed: int, n_fresh: int | None = 10_000, workers: int = 1
) -> np.ndarray:
    """Realized FAR of the fixed conformal threshold ``a`` over independent validation sets.

    With ``n_fresh=None`` the rate is exact: ``p <= a`` holds iff ``t`` lies
    below the ``floor(a (v+1))``-th smallest validation statistic, so the rate
    is ``Phi`` of that order statistic. Otherwise it is estimated on
    ``n_fresh`` fresh H0 draws.
    """
    if not 0.0 < a < 1.0:
        raise DomainError(f"a must lie in (0, 1), got {a}")
    l = beta_far_law(v, a).alpha_shape  # noqa: E741
    root = RngStream(seed)

    def one(i: int) -> float:
        gen = root.substream(i).generator()
        bank = ValidationBank(gen.standard_normal(v))
        if n_fresh is None:
            return 0.0 if l == 0 else float(special.ndtr(bank.statistics[l - 1]))
        fresh = gen.standard_normal(n_fresh)
        return float(np.mean(conformal_p(bank, fresh) <= a))

    return _map_trials(one, trials, workers)

